//! Trajectory CSV files, resampling, and atomic report output.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::Config;
use crate::error::{Error, IngestError};
use crate::evidence::EvidenceSeries;
use crate::friction::FrictionSeries;
use crate::geometry::{Demonstration, PoseSample, Quat, Vec3, WrenchSample};

pub const POSE_WRENCH_COLUMNS: [&str; 14] = [
    "t", "rx", "ry", "rz", "qw", "qx", "qy", "qz", "fx", "fy", "fz", "nx", "ny", "nz",
];
pub const TONG_COLUMNS: [&str; 6] = ["FLx", "FLy", "FLz", "FRx", "FRy", "FRz"];

/// Fewest samples a resampled demonstration may have.
pub const MIN_SAMPLES: usize = 50;

struct RawRow {
    t: f64,
    r: Vec3,
    q: Quat,
    f: Vec3,
    n: Vec3,
    pads: Option<(Vec3, Vec3)>,
}

fn column_map(headers: &csv::StringRecord) -> Result<(Vec<usize>, Option<Vec<usize>>), IngestError> {
    let find = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut main = Vec::with_capacity(POSE_WRENCH_COLUMNS.len());
    for c in POSE_WRENCH_COLUMNS {
        main.push(find(c).ok_or_else(|| IngestError::Schema(format!("missing required column `{c}`")))?);
    }
    let tong: Vec<Option<usize>> = TONG_COLUMNS.iter().map(|c| find(c)).collect();
    let present = tong.iter().filter(|c| c.is_some()).count();
    let tong = match present {
        0 => None,
        6 => Some(tong.into_iter().map(|c| c.expect("all present")).collect()),
        _ => {
            return Err(IngestError::Schema(format!(
                "pad-force columns must appear all together ({})",
                TONG_COLUMNS.join(", ")
            )))
        }
    };
    Ok((main, tong))
}

fn field(rec: &csv::StringRecord, idx: usize, name: &str, row: usize) -> Result<f64, IngestError> {
    let raw = rec.get(idx).ok_or_else(|| IngestError::Malformed {
        row,
        message: format!("missing field `{name}`"),
    })?;
    let v: f64 = raw.trim().parse().map_err(|_| IngestError::Malformed {
        row,
        message: format!("cannot parse `{raw}` in column `{name}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(IngestError::NotFinite {
            row,
            column: name.to_string(),
        });
    }
    Ok(v)
}

fn read_rows<R: std::io::Read>(reader: R) -> Result<Vec<RawRow>, IngestError> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = csv
        .headers()
        .map_err(|e| IngestError::Schema(format!("unreadable header: {e}")))?
        .clone();
    let (main, tong) = column_map(&headers)?;
    let mut rows = Vec::new();
    for (i, rec) in csv.records().enumerate() {
        // File line of the record: the header is line 1.
        let row = i + 2;
        let rec = rec.map_err(|e| IngestError::Malformed {
            row,
            message: e.to_string(),
        })?;
        let mut v = [0.0; 14];
        for (k, name) in POSE_WRENCH_COLUMNS.iter().enumerate() {
            v[k] = field(&rec, main[k], name, row)?;
        }
        let quat = nalgebra::Quaternion::new(v[4], v[5], v[6], v[7]);
        if !(quat.norm() > 1e-12) {
            return Err(IngestError::InvalidQuaternion { row });
        }
        let pads = match &tong {
            None => None,
            Some(cols) => {
                let mut p = [0.0; 6];
                for (k, name) in TONG_COLUMNS.iter().enumerate() {
                    p[k] = field(&rec, cols[k], name, row)?;
                }
                Some((Vec3::new(p[0], p[1], p[2]), Vec3::new(p[3], p[4], p[5])))
            }
        };
        if let Some(prev) = rows.last() {
            let prev: &RawRow = prev;
            if !(v[0] > prev.t) {
                return Err(IngestError::NonMonotone { row });
            }
        }
        rows.push(RawRow {
            t: v[0],
            r: Vec3::new(v[1], v[2], v[3]),
            q: Quat::from_quaternion(quat),
            f: Vec3::new(v[8], v[9], v[10]),
            n: Vec3::new(v[11], v[12], v[13]),
            pads,
        });
    }
    Ok(rows)
}

fn lerp(a: &Vec3, b: &Vec3, s: f64) -> Vec3 {
    a + (b - a) * s
}

fn slerp(a: &Quat, b: &Quat, s: f64) -> Quat {
    // Shortest arc: q and -q are the same rotation.
    let b = if a.coords.dot(&b.coords) < 0.0 {
        Quat::new_unchecked(-b.into_inner())
    } else {
        *b
    };
    a.try_slerp(&b, s, 1e-12).unwrap_or(*a)
}

/// Resamples rows onto a uniform clock starting at the first timestamp.
fn resample(rows: &[RawRow], rate: f64, cfg: &Config) -> Demonstration {
    let t0 = rows[0].t;
    let span = rows[rows.len() - 1].t - t0;
    let n = (span * rate + 1e-9).floor() as usize + 1;
    let mut poses = Vec::with_capacity(n);
    let mut wrenches = Vec::with_capacity(n);
    let has_tong = rows[0].pads.is_some();
    let mut tong = Vec::with_capacity(if has_tong { n } else { 0 });
    let mut j = 0;
    for k in 0..n {
        let t = (t0 + k as f64 / rate).min(rows[rows.len() - 1].t);
        while j + 2 < rows.len() && rows[j + 1].t < t {
            j += 1;
        }
        let (a, b) = if rows.len() == 1 { (&rows[0], &rows[0]) } else { (&rows[j], &rows[j + 1]) };
        let s = if b.t > a.t { ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0) } else { 0.0 };
        poses.push(PoseSample {
            t,
            r: lerp(&a.r, &b.r, s),
            q: slerp(&a.q, &b.q, s),
        });
        wrenches.push(WrenchSample {
            t,
            f: lerp(&a.f, &b.f, s),
            n: lerp(&a.n, &b.n, s),
        });
        if let (Some((la, ra)), Some((lb, rb))) = (a.pads, b.pads) {
            tong.push(cfg.rig.sample(t, lerp(&la, &lb, s), lerp(&ra, &rb, s)));
        }
    }
    Demonstration {
        poses,
        wrenches,
        tong: has_tong.then_some(tong),
    }
}

/// Parses and resamples a trajectory from any reader.
pub fn ingest_reader<R: std::io::Read>(reader: R, cfg: &Config) -> Result<Demonstration, IngestError> {
    let rows = read_rows(reader)?;
    if rows.is_empty() {
        return Err(IngestError::TooShort {
            got: 0,
            needed: MIN_SAMPLES,
        });
    }
    let demo = resample(&rows, cfg.ingestion.rate_hz, cfg);
    if demo.len() < MIN_SAMPLES {
        return Err(IngestError::TooShort {
            got: demo.len(),
            needed: MIN_SAMPLES,
        });
    }
    Ok(demo)
}

/// Reads a trajectory CSV, validates it and resamples every stream to the
/// configured rate. Row numbers in errors are file line numbers.
pub fn ingest(path: &Path, cfg: &Config) -> Result<Demonstration, IngestError> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ingest_reader(std::io::BufReader::new(file), cfg)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err)?;
    tmp.write_all(bytes).map_err(io_err)?;
    tmp.flush().map_err(io_err)?;
    tmp.persist(path).map_err(|e| io_err(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

fn csv_bytes(header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<Vec<u8>, Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.into_inner().map_err(|e| Error::Io {
        path: "<memory>".into(),
        source: e.into_error(),
    })
}

/// Demonstration in the trajectory CSV format (pad columns when present).
pub fn demo_to_csv(demo: &Demonstration) -> Result<Vec<u8>, Error> {
    let mut header: Vec<String> = POSE_WRENCH_COLUMNS.iter().map(|s| s.to_string()).collect();
    if demo.tong.is_some() {
        header.extend(TONG_COLUMNS.iter().map(|s| s.to_string()));
    }
    let rows = (0..demo.len()).map(|i| {
        let p = &demo.poses[i];
        let w = &demo.wrenches[i];
        let q = p.q.quaternion();
        let mut v = vec![p.t, p.r.x, p.r.y, p.r.z, q.w, q.i, q.j, q.k, w.f.x, w.f.y, w.f.z, w.n.x, w.n.y, w.n.z];
        if let Some(tong) = &demo.tong {
            let s = &tong[i];
            v.extend([s.f_l.x, s.f_l.y, s.f_l.z, s.f_r.x, s.f_r.y, s.f_r.z]);
        }
        v.iter().map(|x| format!("{x:e}")).collect()
    });
    csv_bytes(&header, rows)
}

pub fn write_demo_csv(path: &Path, demo: &Demonstration) -> Result<(), Error> {
    atomic_write(path, &demo_to_csv(demo)?)
}

/// Per-sample residual channels plus the friction-coefficient series, ready
/// for external plotting.
pub fn residuals_to_csv(
    demo: &Demonstration,
    series: &EvidenceSeries,
    friction: Option<&FrictionSeries>,
) -> Result<Vec<u8>, Error> {
    let header: Vec<String> = ["t", "E_r", "E_f", "E_q", "E_n", "valid", "F_f", "F_g", "mu_hat"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = (0..series.len()).map(|i| {
        let mut v = vec![
            format!("{:e}", demo.poses[i].t),
            format!("{:e}", series.e_r[i]),
            format!("{:e}", series.e_f[i]),
            format!("{:e}", series.e_q[i]),
            format!("{:e}", series.e_n[i]),
            u8::from(series.valid[i]).to_string(),
        ];
        match friction {
            Some(f) => {
                v.push(format!("{:e}", f.f_f[i]));
                v.push(format!("{:e}", f.f_g[i]));
                v.push(if f.valid[i] { format!("{:e}", f.mu_hat[i]) } else { String::new() });
            }
            None => v.extend([String::new(), String::new(), String::new()]),
        }
        v
    });
    csv_bytes(&header, rows)
}
