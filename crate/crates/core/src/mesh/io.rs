//! Mesh and point-cloud persistence.
//!
//! Meshes go to an OBJ subset (`v`/`f` lines) plus a sidecar JSON
//! (`<path>.json`) carrying the midline ordering and per-face side flags.
//! Point clouds go to CSV with columns `x,y,z[,visible]`.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeformableMesh, MeshError, PointCloud};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("sidecar json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("mesh from {path} is invalid: {source}")]
    InvalidMesh {
        path: String,
        #[source]
        source: MeshError,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct MeshSidecar {
    midline: Vec<usize>,
    side_flags: Vec<i8>,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    std::path::PathBuf::from(s)
}

/// Write `mesh` as OBJ (`v`/`f` lines) and its sidecar JSON next to it.
pub fn write_obj(mesh: &DeformableMesh, path: &Path) -> Result<(), IoError> {
    let mut out = String::new();
    for v in mesh.vertices() {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for f in mesh.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    let sidecar = MeshSidecar {
        midline: mesh.midline().to_vec(),
        side_flags: mesh.side_flags().to_vec(),
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Read an OBJ-subset mesh and its sidecar JSON.
pub fn read_obj(path: &Path) -> Result<DeformableMesh, IoError> {
    let text = fs::read_to_string(path)?;
    let path_str = path.display().to_string();
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coord = |what: &str| -> Result<f64, IoError> {
                    parts
                        .next()
                        .ok_or_else(|| IoError::Parse {
                            path: path_str.clone(),
                            line: ln + 1,
                            message: format!("missing {what} coordinate"),
                        })?
                        .parse()
                        .map_err(|e| IoError::Parse {
                            path: path_str.clone(),
                            line: ln + 1,
                            message: format!("bad {what} coordinate: {e}"),
                        })
                };
                let x = coord("x")?;
                let y = coord("y")?;
                let z = coord("z")?;
                vertices.push(Point3::new(x, y, z));
            }
            Some("f") => {
                let mut idx = [0usize; 3];
                for slot in &mut idx {
                    let token = parts.next().ok_or_else(|| IoError::Parse {
                        path: path_str.clone(),
                        line: ln + 1,
                        message: "face needs 3 indices".into(),
                    })?;
                    // Accept `f 1`, `f 1/2`, `f 1/2/3` forms; only the
                    // vertex index is used.
                    let vtx = token.split('/').next().unwrap_or(token);
                    let one_based: usize = vtx.parse().map_err(|e| IoError::Parse {
                        path: path_str.clone(),
                        line: ln + 1,
                        message: format!("bad face index: {e}"),
                    })?;
                    if one_based == 0 {
                        return Err(IoError::Parse {
                            path: path_str.clone(),
                            line: ln + 1,
                            message: "face indices are 1-based".into(),
                        });
                    }
                    *slot = one_based - 1;
                }
                faces.push(idx);
            }
            _ => {}
        }
    }
    let sidecar: MeshSidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    DeformableMesh::new(vertices, faces, sidecar.midline, sidecar.side_flags).map_err(|source| {
        IoError::InvalidMesh {
            path: path_str,
            source,
        }
    })
}

/// Write a point cloud as CSV (`x,y,z` or `x,y,z,visible`).
pub fn write_cloud_csv(cloud: &PointCloud, path: &Path) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path)?;
    match &cloud.visible {
        None => {
            w.write_record(["x", "y", "z"])?;
            for p in &cloud.points {
                w.write_record([p.x.to_string(), p.y.to_string(), p.z.to_string()])?;
            }
        }
        Some(mask) => {
            w.write_record(["x", "y", "z", "visible"])?;
            for (p, m) in cloud.points.iter().zip(mask) {
                w.write_record([
                    p.x.to_string(),
                    p.y.to_string(),
                    p.z.to_string(),
                    (*m as u8).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a point cloud CSV written by [`write_cloud_csv`].
pub fn read_cloud_csv(path: &Path) -> Result<PointCloud, IoError> {
    let mut r = csv::Reader::from_path(path)?;
    let has_mask = r.headers()?.iter().any(|h| h == "visible");
    let mut points = Vec::new();
    let mut mask = Vec::new();
    let path_str = path.display().to_string();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let field = |j: usize| -> Result<f64, IoError> {
            record
                .get(j)
                .ok_or_else(|| IoError::Parse {
                    path: path_str.clone(),
                    line: i + 2,
                    message: format!("missing column {j}"),
                })?
                .parse()
                .map_err(|e| IoError::Parse {
                    path: path_str.clone(),
                    line: i + 2,
                    message: format!("bad float: {e}"),
                })
        };
        points.push(Point3::new(field(0)?, field(1)?, field(2)?));
        if has_mask {
            mask.push(record.get(3).map(|v| v.trim() != "0").unwrap_or(true));
        }
    }
    let cloud = if has_mask {
        PointCloud::with_visibility(points, mask)
    } else {
        PointCloud::new(points)
    };
    cloud.map_err(|source| IoError::InvalidMesh {
        path: path_str,
        source,
    })
}
