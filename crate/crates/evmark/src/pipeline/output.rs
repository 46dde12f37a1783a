//! Plain-text output formats for pipeline runs: the pose stream and the
//! verification stream as headered CSV, run metrics as JSON. Readers are
//! provided so downstream evaluation can consume the same files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::geometry::Pose;

use super::{BacktrackRecord, PipelineError, PoseRecord, RunMetrics};

pub const POSE_CSV_HEADER: &str = "t_us,marker_id,tx,ty,tz,r11,r12,r13,r21,r22,r23,r31,r32,r33";
pub const BACKTRACK_CSV_HEADER: &str = "window_end_t_us,marker_id,d_t_px,d_r_rad,lost";

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, line: usize, what: impl Into<String>) -> PipelineError {
    PipelineError::Format {
        path: path.display().to_string(),
        line,
        what: what.into(),
    }
}

/// Write the pose stream: one row per applied update, row-major rotation.
pub fn write_pose_csv(path: impl AsRef<Path>, poses: &[PoseRecord]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{POSE_CSV_HEADER}")?;
        for r in poses {
            let t = &r.pose.translation;
            let m = &r.pose.rotation;
            write!(w, "{},{},{:.9},{:.9},{:.9}", r.t, r.marker_id, t.x, t.y, t.z)?;
            for i in 0..3 {
                for j in 0..3 {
                    write!(w, ",{:.9}", m[(i, j)])?;
                }
            }
            writeln!(w)?;
        }
        w.flush()
    };
    emit().map_err(|e| io_err(path, e))
}

/// Read a pose stream written by [`write_pose_csv`].
pub fn read_pose_csv(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>, PipelineError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("t_us")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            return Err(format_err(
                path,
                idx + 1,
                format!("expected 14 fields, got {}", fields.len()),
            ));
        }
        let t: u64 = fields[0]
            .parse()
            .map_err(|_| format_err(path, idx + 1, "bad timestamp"))?;
        let marker_id: u32 = fields[1]
            .parse()
            .map_err(|_| format_err(path, idx + 1, "bad marker id"))?;
        let mut vals = [0.0f64; 12];
        for (k, f) in fields[2..].iter().enumerate() {
            vals[k] = f
                .parse()
                .map_err(|_| format_err(path, idx + 1, format!("bad number {f:?}")))?;
        }
        let translation = Vector3::new(vals[0], vals[1], vals[2]);
        let rotation = Matrix3::new(
            vals[3], vals[4], vals[5], vals[6], vals[7], vals[8], vals[9], vals[10], vals[11],
        );
        out.push(PoseRecord {
            t,
            marker_id,
            pose: Pose::new(rotation, translation),
        });
    }
    Ok(out)
}

/// Write the verification stream: one row per backtracked window.
pub fn write_backtrack_csv(
    path: impl AsRef<Path>,
    reports: &[BacktrackRecord],
) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "{BACKTRACK_CSV_HEADER}")?;
        for r in reports {
            writeln!(
                w,
                "{},{},{:.9},{:.9},{}",
                r.window_end_t,
                r.marker_id,
                r.d_t,
                r.d_r,
                u8::from(r.lost)
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| io_err(path, e))
}

/// Read a verification stream written by [`write_backtrack_csv`].
pub fn read_backtrack_csv(path: impl AsRef<Path>) -> Result<Vec<BacktrackRecord>, PipelineError> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line = line.trim();
        if line.is_empty() || (idx == 0 && line.starts_with("window_end_t_us")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(format_err(
                path,
                idx + 1,
                format!("expected 5 fields, got {}", fields.len()),
            ));
        }
        let window_end_t: u64 = fields[0]
            .parse()
            .map_err(|_| format_err(path, idx + 1, "bad timestamp"))?;
        let marker_id: u32 = fields[1]
            .parse()
            .map_err(|_| format_err(path, idx + 1, "bad marker id"))?;
        let d_t: f64 = fields[2]
            .parse()
            .map_err(|_| format_err(path, idx + 1, "bad d_t"))?;
        let d_r: f64 = fields[3]
            .parse()
            .map_err(|_| format_err(path, idx + 1, "bad d_r"))?;
        let lost = match fields[4] {
            "0" => false,
            "1" => true,
            other => return Err(format_err(path, idx + 1, format!("bad lost flag {other:?}"))),
        };
        out.push(BacktrackRecord {
            window_end_t,
            marker_id,
            d_t,
            d_r,
            lost,
        });
    }
    Ok(out)
}

/// Write run metrics as pretty-printed JSON.
pub fn write_metrics_json(
    path: impl AsRef<Path>,
    metrics: &RunMetrics,
) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(metrics)
        .map_err(|e| PipelineError::Config(format!("metrics serialization: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pose_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poses.csv");
        let rot = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        let records = vec![
            PoseRecord {
                t: 1000,
                marker_id: 7,
                pose: Pose::new(rot, Vector3::new(0.01, -0.02, 0.5)),
            },
            PoseRecord {
                t: 2000,
                marker_id: 7,
                pose: Pose::identity(),
            },
        ];
        write_pose_csv(&path, &records).unwrap();
        let back = read_pose_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.t, b.t);
            assert_eq!(a.marker_id, b.marker_id);
            assert!((a.pose.translation - b.pose.translation).norm() < 1e-8);
            assert!((a.pose.rotation - b.pose.rotation).norm() < 1e-8);
        }
    }

    #[test]
    fn backtrack_csv_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backtrack.csv");
        let records = vec![
            BacktrackRecord {
                window_end_t: 50_000,
                marker_id: 3,
                d_t: 1.25,
                d_r: 0.01,
                lost: false,
            },
            BacktrackRecord {
                window_end_t: 90_000,
                marker_id: 3,
                d_t: 9.5,
                d_r: 0.3,
                lost: true,
            },
        ];
        write_backtrack_csv(&path, &records).unwrap();
        let back = read_backtrack_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert!(!back[0].lost);
        assert!(back[1].lost);
        assert!((back[1].d_t - 9.5).abs() < 1e-9);
    }

    #[test]
    fn malformed_rows_are_rejected_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, format!("{POSE_CSV_HEADER}\n1,2,3\n")).unwrap();
        let err = read_pose_csv(&path).unwrap_err();
        match err {
            PipelineError::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn metrics_json_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.json");
        let metrics = RunMetrics {
            events_read: 10,
            ..RunMetrics::default()
        };
        write_metrics_json(&path, &metrics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value["events_read"], 10);
    }
}
