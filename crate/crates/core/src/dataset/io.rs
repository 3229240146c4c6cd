//! On-disk sequence layout.
//!
//! ```text
//! <dir>/manifest.txt     key = value calibration
//! <dir>/frames.csv       frame_id,t,filename   (filename relative to <dir>)
//! <dir>/frames/*.pgm     8-bit binary PGM (P5)
//! <dir>/imu.csv          t,ax,ay,az,gx,gy,gz
//! <dir>/flow.csv         frame_id,x_prev,y_prev,x_curr,y_curr,hamming,cornerness  (optional)
//! <dir>/groundtruth.txt  TUM: t tx ty tz qx qy qz qw                             (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Quaternion;

use super::{
    non_monotonic_indices, DatasetError, FrameRecord, ImuSample, Sequence, SequenceManifest,
    StampedPose,
};
use crate::geometry::{Quat, Vec3};
use crate::image::GrayImage;
use crate::sensor_emu::{FlowVector, Pixel};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const FRAMES_FILE: &str = "frames.csv";
pub const IMU_FILE: &str = "imu.csv";
pub const FLOW_FILE: &str = "flow.csv";
pub const GROUND_TRUTH_FILE: &str = "groundtruth.txt";

const IMU_HEADER: &str = "t,ax,ay,az,gx,gy,gz";
const FRAMES_HEADER: &str = "frame_id,t,filename";
const FLOW_HEADER: &str = "frame_id,x_prev,y_prev,x_curr,y_curr,hamming,cornerness";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_text(path: &Path) -> Result<String, DatasetError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Keeps exactly-unit quaternions bit-for-bit, renormalizes near-unit ones.
pub(crate) fn unit_quat(q: Quaternion<f64>) -> Quat {
    if (q.norm() - 1.0).abs() <= 1e-12 {
        Quat::new_unchecked(q)
    } else {
        Quat::new_normalize(q)
    }
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

/// Splits a CSV file into numbered data rows, checking the header.
fn csv_rows<'a>(text: &'a str, file: &str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>, DatasetError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim().replace(' ', "") == header => {}
        Some((_, h)) => return Err(malformed(file, 1, format!("expected header `{header}`, found `{h}`"))),
        None => return Err(malformed(file, 1, "empty file")),
    }
    let ncols = header.split(',').count();
    let mut rows = Vec::new();
    for (i, l) in lines {
        let l = l.trim();
        if l.is_empty() {
            continue;
        }
        let cols: Vec<&str> = l.split(',').map(str::trim).collect();
        if cols.len() != ncols {
            return Err(malformed(file, i + 1, format!("expected {ncols} columns, found {}", cols.len())));
        }
        rows.push((i + 1, cols));
    }
    Ok(rows)
}

fn parse_num<T: std::str::FromStr>(s: &str, file: &str, line: usize, what: &str) -> Result<T, DatasetError> {
    s.parse::<T>()
        .map_err(|_| malformed(file, line, format!("cannot parse {what} from {s:?}")))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let name = path.display().to_string();
    // Header: magic, width, height, maxval, separated by whitespace/comments.
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed(&name, 1, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1; // single whitespace after maxval
    if fields[0] != "P5" {
        return Err(malformed(&name, 1, format!("expected P5, found {}", fields[0])));
    }
    let w: usize = parse_num(&fields[1], &name, 1, "width")?;
    let h: usize = parse_num(&fields[2], &name, 1, "height")?;
    let maxval: u32 = parse_num(&fields[3], &name, 1, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(malformed(&name, 1, format!("only 8-bit PGM supported (maxval {maxval})")));
    }
    let data = bytes.get(pos..pos + w * h).ok_or_else(|| malformed(&name, 1, "truncated pixel data"))?;
    Ok(GrayImage::from_raw(w, h, data.to_vec())?)
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<(), DatasetError> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.as_raw());
    fs::write(path, out).map_err(io_err(path))
}

/// Reads a TUM trajectory (`t tx ty tz qx qy qz qw`, `#` comments allowed).
pub fn read_tum(path: &Path) -> Result<Vec<StampedPose>, DatasetError> {
    let text = read_text(path)?;
    let file = path.display().to_string();
    let mut poses = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|s| parse_num::<f64>(s, &file, i + 1, "number"))
            .collect::<Result<_, _>>()?;
        if v.len() != 8 {
            return Err(malformed(&file, i + 1, format!("expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if (q.norm() - 1.0).abs() > 1e-3 {
            return Err(malformed(&file, i + 1, format!("quaternion norm {} is not 1", q.norm())));
        }
        poses.push(StampedPose {
            t: v[0],
            position: Vec3::new(v[1], v[2], v[3]),
            orientation: unit_quat(q),
        });
    }
    let bad = non_monotonic_indices(poses.iter().map(|p| p.t));
    if !bad.is_empty() {
        return Err(DatasetError::NonMonotonic { file, indices: bad });
    }
    Ok(poses)
}

pub fn write_tum(path: &Path, poses: &[StampedPose]) -> Result<(), DatasetError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "# t tx ty tz qx qy qz qw")?;
        for p in poses {
            let q = p.orientation.quaternion();
            writeln!(
                w,
                "{} {} {} {} {} {} {} {}",
                p.t, p.position.x, p.position.y, p.position.z, q.i, q.j, q.k, q.w
            )?;
        }
        w.flush()
    })();
    res.map_err(io_err(path))
}

fn parse_imu(text: &str) -> Result<Vec<ImuSample>, DatasetError> {
    let rows = csv_rows(text, IMU_FILE, IMU_HEADER)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, cols) in rows {
        let v: Vec<f64> = cols
            .iter()
            .map(|c| parse_num::<f64>(c, IMU_FILE, line, "number"))
            .collect::<Result<_, _>>()?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(malformed(IMU_FILE, line, "non-finite value"));
        }
        out.push(ImuSample {
            t: v[0],
            accel: Vec3::new(v[1], v[2], v[3]),
            gyro: Vec3::new(v[4], v[5], v[6]),
        });
    }
    let bad = non_monotonic_indices(out.iter().map(|s| s.t));
    if !bad.is_empty() {
        return Err(DatasetError::NonMonotonic {
            file: IMU_FILE.into(),
            indices: bad,
        });
    }
    Ok(out)
}

fn parse_flow(text: &str) -> Result<BTreeMap<u64, Vec<FlowVector>>, DatasetError> {
    let rows = csv_rows(text, FLOW_FILE, FLOW_HEADER)?;
    let mut out: BTreeMap<u64, Vec<FlowVector>> = BTreeMap::new();
    for (line, cols) in rows {
        let frame_id: u64 = parse_num(cols[0], FLOW_FILE, line, "frame_id")?;
        // Sub-pixel coordinates are quantized to the nearest pixel.
        let mut px = [0i32; 4];
        for (k, c) in cols[1..5].iter().enumerate() {
            let v: f64 = parse_num(c, FLOW_FILE, line, "coordinate")?;
            if !v.is_finite() {
                return Err(malformed(FLOW_FILE, line, "non-finite coordinate"));
            }
            px[k] = v.round() as i32;
        }
        out.entry(frame_id).or_default().push(FlowVector {
            prev: Pixel::new(px[0], px[1]),
            curr: Pixel::new(px[2], px[3]),
            hamming: parse_num(cols[5], FLOW_FILE, line, "hamming")?,
            cornerness: parse_num(cols[6], FLOW_FILE, line, "cornerness")?,
        });
    }
    Ok(out)
}

/// Writes flow records in `flow.csv` form.
pub fn write_flow_csv(path: &Path, flow: &BTreeMap<u64, Vec<FlowVector>>) -> Result<(), DatasetError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{FLOW_HEADER}")?;
        for (id, vs) in flow {
            for v in vs {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    id, v.prev.x, v.prev.y, v.curr.x, v.curr.y, v.hamming, v.cornerness
                )?;
            }
        }
        w.flush()
    })();
    res.map_err(io_err(path))
}

pub fn load_sequence(dir: &Path) -> Result<Sequence, DatasetError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(DatasetError::MissingManifest(manifest_path));
    }
    let (manifest, unknown) = SequenceManifest::parse(&read_text(&manifest_path)?)?;
    for k in unknown {
        log::warn!("{}: unknown key `{k}` ignored", manifest_path.display());
    }

    let frames_path = dir.join(FRAMES_FILE);
    let imu_path = dir.join(IMU_FILE);
    for p in [&frames_path, &imu_path] {
        if !p.is_file() {
            return Err(DatasetError::MissingFile(p.clone()));
        }
    }

    let frames_text = read_text(&frames_path)?;
    let mut frames = Vec::new();
    for (line, cols) in csv_rows(&frames_text, FRAMES_FILE, FRAMES_HEADER)? {
        let frame_id: u64 = parse_num(cols[0], FRAMES_FILE, line, "frame_id")?;
        let t: f64 = parse_num(cols[1], FRAMES_FILE, line, "t")?;
        let image = read_pgm(&dir.join(cols[2]))?;
        frames.push(FrameRecord { frame_id, t, image });
    }
    let bad = non_monotonic_indices(frames.iter().map(|f| f.t));
    if !bad.is_empty() {
        return Err(DatasetError::NonMonotonic {
            file: FRAMES_FILE.into(),
            indices: bad,
        });
    }

    let imu = parse_imu(&read_text(&imu_path)?)?;

    let flow_path = dir.join(FLOW_FILE);
    let flow = if flow_path.is_file() {
        parse_flow(&read_text(&flow_path)?)?
    } else {
        BTreeMap::new()
    };

    let gt_path = dir.join(GROUND_TRUTH_FILE);
    let ground_truth = if gt_path.is_file() { read_tum(&gt_path)? } else { Vec::new() };

    let seq = Sequence {
        manifest,
        frames,
        imu,
        flow,
        ground_truth,
    };
    seq.validate()?;
    Ok(seq)
}

pub fn save_sequence(seq: &Sequence, dir: &Path) -> Result<(), DatasetError> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, seq.manifest.to_text()).map_err(io_err(&manifest_path))?;

    let mut frames_csv = format!("{FRAMES_HEADER}\n");
    for f in &seq.frames {
        let rel: PathBuf = Path::new("frames").join(format!("{:06}.pgm", f.frame_id));
        write_pgm(&dir.join(&rel), &f.image)?;
        frames_csv += &format!("{},{},{}\n", f.frame_id, f.t, rel.display());
    }
    let frames_path = dir.join(FRAMES_FILE);
    fs::write(&frames_path, frames_csv).map_err(io_err(&frames_path))?;

    let imu_path = dir.join(IMU_FILE);
    let f = fs::File::create(&imu_path).map_err(io_err(&imu_path))?;
    let mut w = BufWriter::new(f);
    let res: std::io::Result<()> = (|| {
        writeln!(w, "{IMU_HEADER}")?;
        for s in &seq.imu {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.t, s.accel.x, s.accel.y, s.accel.z, s.gyro.x, s.gyro.y, s.gyro.z
            )?;
        }
        w.flush()
    })();
    res.map_err(io_err(&imu_path))?;

    if !seq.flow.is_empty() {
        write_flow_csv(&dir.join(FLOW_FILE), &seq.flow)?;
    }
    if !seq.ground_truth.is_empty() {
        write_tum(&dir.join(GROUND_TRUTH_FILE), &seq.ground_truth)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::manifest;

    fn tiny_sequence() -> Sequence {
        let m = manifest();
        let frames = (0..2)
            .map(|i| FrameRecord {
                frame_id: i,
                t: 0.05 * i as f64,
                image: GrayImage::from_fn(m.width, m.height, |x, y| (x * 3 + y * 5 + i as usize) as u8),
            })
            .collect();
        let imu = (0..10)
            .map(|i| ImuSample {
                t: i as f64 / 100.0,
                accel: Vec3::new(0.1, -0.2, 9.81 + 1e-3 * i as f64),
                gyro: Vec3::new(0.0, 0.01, 1.0 / 3.0),
            })
            .collect();
        Sequence {
            manifest: m,
            frames,
            imu,
            flow: BTreeMap::new(),
            ground_truth: Vec::new(),
        }
    }

    #[test]
    fn optional_streams_absent() {
        let dir = tempfile::tempdir().unwrap();
        let seq = tiny_sequence();
        save_sequence(&seq, dir.path()).unwrap();
        let back = load_sequence(dir.path()).unwrap();
        assert!(back.flow.is_empty());
        assert!(back.ground_truth.is_empty());
        assert_eq!(back, seq);
    }

    #[test]
    fn missing_manifest_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence(dir.path()), Err(DatasetError::MissingManifest(_))));
    }

    #[test]
    fn repeated_imu_timestamp_reported_at_index_2() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny_sequence(), dir.path()).unwrap();
        fs::write(
            dir.path().join(IMU_FILE),
            "t,ax,ay,az,gx,gy,gz\n0.0,0,0,9.81,0,0,0\n0.1,0,0,9.81,0,0,0\n0.1,0,0,9.81,0,0,0\n",
        )
        .unwrap();
        match load_sequence(dir.path()) {
            Err(DatasetError::NonMonotonic { indices, .. }) => assert_eq!(indices, vec![2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_row_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        save_sequence(&tiny_sequence(), dir.path()).unwrap();
        fs::write(dir.path().join(IMU_FILE), "t,ax,ay,az,gx,gy,gz\n0.0,0,0,9.81,0,0,0\n0.01,0,x,9.81,0,0,0\n").unwrap();
        match load_sequence(dir.path()) {
            Err(DatasetError::Malformed { file, line, .. }) => {
                assert_eq!(file, IMU_FILE);
                assert_eq!(line, 3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn flow_and_ground_truth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut seq = tiny_sequence();
        seq.flow.insert(
            1,
            vec![FlowVector {
                prev: Pixel::new(10, 11),
                curr: Pixel::new(12, 11),
                hamming: 7,
                cornerness: 900,
            }],
        );
        seq.ground_truth = vec![
            StampedPose {
                t: 0.0,
                position: Vec3::new(0.1, 0.2, 1.0 / 3.0),
                orientation: crate::geometry::from_ypr(0.3, 0.1, -0.2),
            },
            StampedPose {
                t: 0.01,
                position: Vec3::new(0.2, 0.2, 0.3),
                orientation: Quat::identity(),
            },
        ];
        save_sequence(&seq, dir.path()).unwrap();
        assert_eq!(load_sequence(dir.path()).unwrap(), seq);
    }

    #[test]
    fn pgm_rejects_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P5\n2 1\n65535\n\0\0\0\0").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
