//! ASCII PLY for SfM point clouds and Gaussian clouds.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::init::{PointLabel, PointSource, SfMPoints};
use crate::splat::{Gaussian3D, GaussianCloud, ShCoeffs};

/// Display gamma used to store 8-bit point colors.
pub const COLOR_GAMMA: f64 = 2.2;

/// Parsed ASCII PLY with a single `vertex` element.
#[derive(Debug, Clone, PartialEq)]
pub struct PlyTable {
    pub comments: Vec<String>,
    pub properties: Vec<(String, String)>,
    pub rows: Vec<Vec<f64>>,
}

impl PlyTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|(_, n)| n == name)
    }

    /// Value of a `comment key value` line.
    pub fn comment_value(&self, key: &str) -> Option<&str> {
        self.comments.iter().find_map(|c| {
            let mut it = c.splitn(2, ' ');
            (it.next() == Some(key)).then(|| it.next().unwrap_or("").trim())
        })
    }

    pub fn encode(&self) -> String {
        let mut s = String::from("ply\nformat ascii 1.0\n");
        for c in &self.comments {
            let _ = writeln!(s, "comment {c}");
        }
        let _ = writeln!(s, "element vertex {}", self.rows.len());
        for (t, n) in &self.properties {
            let _ = writeln!(s, "property {t} {n}");
        }
        s.push_str("end_header\n");
        for row in &self.rows {
            let mut first = true;
            for ((t, _), v) in self.properties.iter().zip(row) {
                if !first {
                    s.push(' ');
                }
                first = false;
                if is_integer_type(t) {
                    let _ = write!(s, "{}", *v as i64);
                } else {
                    let _ = write!(s, "{v:?}");
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn decode(text: &str, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format("PLY", path, msg);
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("ply") {
            return Err(bad("missing ply magic".into()));
        }
        let mut comments = Vec::new();
        let mut properties = Vec::new();
        let mut count = None;
        let mut in_vertex = false;
        loop {
            let line = lines.next().ok_or_else(|| bad("header not terminated".into()))?.trim();
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("format") => {
                    if tok.next() != Some("ascii") {
                        return Err(bad(format!("unsupported format line '{line}'")));
                    }
                }
                Some("comment") => comments.push(line["comment".len()..].trim().to_string()),
                Some("element") => {
                    let name = tok.next().unwrap_or("");
                    let n: usize = tok.next().and_then(|v| v.parse().ok()).ok_or_else(|| bad(format!("bad element line '{line}'")))?;
                    in_vertex = name == "vertex";
                    if in_vertex {
                        count = Some(n);
                    } else if n > 0 {
                        return Err(bad(format!("unsupported element '{name}'")));
                    }
                }
                Some("property") if in_vertex => {
                    let t = tok.next().ok_or_else(|| bad(format!("bad property line '{line}'")))?;
                    if t == "list" {
                        return Err(bad("list properties unsupported".into()));
                    }
                    let n = tok.next().ok_or_else(|| bad(format!("bad property line '{line}'")))?;
                    properties.push((t.to_string(), n.to_string()));
                }
                Some("property") | Some("obj_info") | None => {}
                Some("end_header") => break,
                Some(other) => return Err(bad(format!("unexpected header keyword '{other}'"))),
            }
        }
        let count = count.ok_or_else(|| bad("no vertex element".into()))?;
        let mut rows = Vec::with_capacity(count);
        for (i, line) in lines.filter(|l| !l.trim().is_empty()).take(count).enumerate() {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| bad(format!("vertex {i}: unparsable value")))?;
            if row.len() != properties.len() {
                return Err(bad(format!("vertex {i}: {} values for {} properties", row.len(), properties.len())));
            }
            rows.push(row);
        }
        if rows.len() != count {
            return Err(bad(format!("expected {count} vertices, found {}", rows.len())));
        }
        Ok(Self {
            comments,
            properties,
            rows,
        })
    }
}

fn is_integer_type(t: &str) -> bool {
    matches!(t, "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "int8" | "uint8" | "int16" | "uint16" | "int32" | "uint32")
}

fn read_table(path: &Path) -> Result<PlyTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PlyTable::decode(&text, path)
}

fn write_table(path: &Path, table: &PlyTable) -> Result<()> {
    fs::write(path, table.encode()).map_err(|e| Error::io(path, e))
}

/// Raw-linear color to an 8-bit display value.
pub fn color_to_u8(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0).powf(1.0 / COLOR_GAMMA)).round() as u8
}

pub fn color_from_u8(c: u8) -> f64 {
    (c as f64 / 255.0).powf(COLOR_GAMMA)
}

/// Points as `x y z red green blue [label]`; label 0 is transmitted, 1 reflected.
pub fn points_table(points: &SfMPoints) -> PlyTable {
    let mut properties: Vec<(String, String)> = ["x", "y", "z"].iter().map(|n| ("double".to_string(), n.to_string())).collect();
    properties.extend(["red", "green", "blue"].iter().map(|n| ("uchar".to_string(), n.to_string())));
    if points.labels.is_some() {
        properties.push(("uchar".into(), "label".into()));
    }
    let source = match points.source {
        PointSource::Flash => "flash",
        PointSource::NoFlash => "noflash",
    };
    let rows = (0..points.len())
        .map(|i| {
            let p = &points.positions[i];
            let c = &points.colors[i];
            let mut r = vec![p.x, p.y, p.z];
            r.extend(c.iter().map(|&v| color_to_u8(v) as f64));
            if let Some(l) = &points.labels {
                r.push(match l[i] {
                    PointLabel::Transmitted => 0.0,
                    PointLabel::Reflected => 1.0,
                });
            }
            r
        })
        .collect();
    PlyTable {
        comments: vec![format!("source {source}")],
        properties,
        rows,
    }
}

pub fn points_from_table(t: &PlyTable, path: &Path) -> Result<SfMPoints> {
    let col = |n: &str| t.column(n).ok_or_else(|| Error::format("PLY", path, format!("missing property {n}")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let (r, g, b) = (col("red")?, col("green")?, col("blue")?);
    let label = t.column("label");
    let source = match t.comment_value("source") {
        Some("flash") => PointSource::Flash,
        _ => PointSource::NoFlash,
    };
    let mut pos = Vec::with_capacity(t.rows.len());
    let mut cols = Vec::with_capacity(t.rows.len());
    let mut labels = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        pos.push(Vector3::new(row[x], row[y], row[z]));
        let to_u8 = |v: f64| -> Result<u8> {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::format("PLY", path, format!("color value {v} is not a uchar")))
            }
        };
        cols.push([color_from_u8(to_u8(row[r])?), color_from_u8(to_u8(row[g])?), color_from_u8(to_u8(row[b])?)]);
        if let Some(l) = label {
            labels.push(match row[l] as i64 {
                0 => PointLabel::Transmitted,
                1 => PointLabel::Reflected,
                v => return Err(Error::format("PLY", path, format!("unknown label {v}"))),
            });
        }
    }
    let mut pts = SfMPoints::new(pos, cols, source).map_err(|e| Error::format("PLY", path, e.to_string()))?;
    if label.is_some() {
        pts.labels = Some(labels);
    }
    Ok(pts)
}

pub fn write_points(path: &Path, points: &SfMPoints) -> Result<()> {
    write_table(path, &points_table(points))
}

pub fn read_points(path: &Path) -> Result<SfMPoints> {
    points_from_table(&read_table(path)?, path)
}

/// Gaussian cloud as `x y z rot_0..3 scale_0..2 opacity sh_0..`, all in
/// parameter space (log scales, opacity logits) with round-trip formatting.
pub fn cloud_table(cloud: &GaussianCloud) -> PlyTable {
    let mut names: Vec<String> = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3", "scale_0", "scale_1", "scale_2", "opacity"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..cloud.sh_len()).map(|k| format!("sh_{k}")));
    let rows = cloud
        .gaussians
        .iter()
        .map(|g| {
            let mut r = vec![g.position.x, g.position.y, g.position.z];
            r.extend_from_slice(&g.rotation);
            r.extend(g.log_scale.iter());
            r.push(g.opacity_logit);
            r.extend_from_slice(&g.sh.coeffs);
            r
        })
        .collect();
    PlyTable {
        comments: vec![format!("channels {}", cloud.channels), format!("sh_degree {}", cloud.sh_degree)],
        properties: names.into_iter().map(|n| ("double".to_string(), n)).collect(),
        rows,
    }
}

pub fn cloud_from_table(t: &PlyTable, path: &Path) -> Result<GaussianCloud> {
    let bad = |m: String| Error::format("PLY", path, m);
    let parse = |key: &str| -> Result<usize> {
        t.comment_value(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("missing '{key}' comment")))
    };
    let channels = parse("channels")?;
    let degree = parse("sh_degree")?;
    let mut cloud = GaussianCloud::new(channels, degree);
    let expected = cloud_table(&cloud).properties;
    if t.properties.iter().map(|p| &p.1).ne(expected.iter().map(|p| &p.1)) {
        return Err(bad(format!("property layout does not match {channels} channels, SH degree {degree}")));
    }
    for row in &t.rows {
        cloud.gaussians.push(Gaussian3D {
            position: Vector3::new(row[0], row[1], row[2]),
            rotation: [row[3], row[4], row[5], row[6]],
            log_scale: Vector3::new(row[7], row[8], row[9]),
            opacity_logit: row[10],
            sh: ShCoeffs {
                degree,
                channels,
                coeffs: row[11..].to_vec(),
            },
        });
    }
    cloud.validate().map_err(|e| bad(e.to_string()))?;
    Ok(cloud)
}

pub fn write_cloud(path: &Path, cloud: &GaussianCloud) -> Result<()> {
    write_table(path, &cloud_table(cloud))
}

pub fn read_cloud(path: &Path) -> Result<GaussianCloud> {
    cloud_from_table(&read_table(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn u8_color_roundtrip() {
        for c in 0..=255u8 {
            assert_eq!(color_to_u8(color_from_u8(c)), c);
        }
        assert_eq!(color_to_u8(2.0), 255);
        assert_eq!(color_to_u8(-1.0), 0);
    }

    #[test]
    fn table_roundtrip_with_extreme_values() {
        let t = PlyTable {
            comments: vec!["channels 3".into()],
            properties: vec![("double".into(), "a".into()), ("uchar".into(), "b".into())],
            rows: vec![vec![0.1 + 0.2, 7.0], vec![-1e-300, 255.0], vec![f64::MAX, 0.0]],
        };
        let back = PlyTable::decode(&t.encode(), Path::new("x")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_binary_and_short_files() {
        let p = Path::new("x");
        assert!(PlyTable::decode("ply\nformat binary_little_endian 1.0\nend_header\n", p).is_err());
        assert!(PlyTable::decode("ply\nformat ascii 1.0\nelement vertex 2\nproperty double x\nend_header\n1\n", p).is_err());
        assert!(PlyTable::decode("ply\nformat ascii 1.0\nelement vertex 1\nproperty double x\nend_header\n1 2\n", p).is_err());
        assert!(PlyTable::decode("not a ply", p).is_err());
    }
}
