//! Wavefront OBJ for meshes, ASCII PLY for oriented points, and a small
//! binary container for point clouds.
//!
//! Cloud files are a 16-byte header (8-byte magic `TMCLOUD1`, little-endian
//! `u64` point count) followed by `count` little-endian `f64` triples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Mesh, MeshError, PointCloud, Result};
use crate::geom::Point3;

pub const CLOUD_MAGIC: &[u8; 8] = b"TMCLOUD1";

fn parse_err(line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse { line, msg: msg.into() }
}

/// Reads a triangle-only OBJ. Texture and normal references on `f`
/// records are ignored; other record types are skipped.
pub fn read_obj(reader: impl BufRead) -> Result<Mesh> {
    let mut vertices: Vec<Point3> = Vec::new();
    let mut faces: Vec<([i64; 3], usize)> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut p = [0.0; 3];
                for c in &mut p {
                    *c = tok
                        .next()
                        .ok_or_else(|| parse_err(lineno, "vertex needs three coordinates"))?
                        .parse()
                        .map_err(|e| parse_err(lineno, format!("bad coordinate: {e}")))?;
                }
                vertices.push(p);
            }
            Some("f") => {
                let refs: Vec<&str> = tok.collect();
                if refs.len() != 3 {
                    return Err(parse_err(
                        lineno,
                        format!("face has {} vertices, only triangles are supported", refs.len()),
                    ));
                }
                let mut idx = [0i64; 3];
                for (k, r) in refs.iter().enumerate() {
                    let head = r.split('/').next().unwrap_or("");
                    idx[k] = head
                        .parse()
                        .map_err(|e| parse_err(lineno, format!("bad face index `{head}`: {e}")))?;
                }
                faces.push((idx, lineno));
            }
            _ => {}
        }
    }
    let n = vertices.len() as i64;
    let mut tris = Vec::with_capacity(faces.len());
    for (idx, lineno) in faces {
        let mut t = [0usize; 3];
        for k in 0..3 {
            // 1-based; negative values count back from the end
            let resolved = match idx[k] {
                0 => return Err(parse_err(lineno, "face index 0 (OBJ indices are 1-based)")),
                v if v > 0 => v - 1,
                v => n + v,
            };
            if resolved < 0 || resolved >= n {
                return Err(parse_err(
                    lineno,
                    format!("face index {} out of range for {n} vertices", idx[k]),
                ));
            }
            t[k] = resolved as usize;
        }
        tris.push(t);
    }
    Mesh::new(vertices, tris)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    read_obj(BufReader::new(File::open(path)?))
}

/// Coordinates use the shortest representation that parses back exactly.
pub fn write_obj(mesh: &Mesh, mut w: impl Write) -> Result<()> {
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
    }
    Ok(())
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_obj(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

/// ASCII PLY with `x y z nx ny nz` per vertex, the input Poisson
/// reconstruction tools expect. The cloud must carry normals.
pub fn write_ply(cloud: &PointCloud, mut w: impl Write) -> Result<()> {
    let normals = cloud.normals.as_ref().ok_or(MeshError::CloudLength("normals"))?;
    if normals.len() != cloud.len() {
        return Err(MeshError::CloudLength("normals"));
    }
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z", "nx", "ny", "nz"] {
        writeln!(w, "property double {p}")?;
    }
    writeln!(w, "end_header")?;
    for (p, n) in cloud.points.iter().zip(normals) {
        writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], n[0], n[1], n[2])?;
    }
    Ok(())
}

pub fn save_ply(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_ply(cloud, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_points_bin(points: &[Point3], mut w: impl Write) -> Result<()> {
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&(points.len() as u64).to_le_bytes())?;
    for p in points {
        for c in p {
            w.write_all(&c.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_points_bin(mut r: impl Read) -> Result<Vec<Point3>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..8] != CLOUD_MAGIC {
        return Err(parse_err(0, "not a point cloud file (bad magic)"));
    }
    let count = u64::from_le_bytes(header[8..].try_into().expect("8 bytes")) as usize;
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() != count * 24 {
        return Err(parse_err(
            0,
            format!("expected {} payload bytes, found {}", count * 24, buf.len()),
        ));
    }
    Ok(buf
        .chunks_exact(24)
        .map(|c| {
            let f = |k: usize| f64::from_le_bytes(c[k * 8..k * 8 + 8].try_into().expect("8 bytes"));
            [f(0), f(1), f(2)]
        })
        .collect())
}

pub fn save_points_bin(points: &[Point3], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_points_bin(points, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_points_bin(path: impl AsRef<Path>) -> Result<Vec<Point3>> {
    read_points_bin(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{make_icosphere, sample_surface};

    #[test]
    fn obj_round_trip() {
        let m = make_icosphere(2).unwrap();
        let mut buf = Vec::new();
        write_obj(&m, &mut buf).unwrap();
        let back = read_obj(&buf[..]).unwrap();
        assert_eq!(back.faces(), m.faces());
        assert_eq!(back.vertices(), m.vertices());
        assert_eq!(back.edge_count(), m.edge_count());
    }

    #[test]
    fn obj_slashes_and_comments() {
        let src = "# tri\nv 0 0 0\nv 1 0 0\nvn 0 0 1\nv 0 1 0\nf 1/1/1 2//1 3\n";
        let m = read_obj(src.as_bytes()).unwrap();
        assert_eq!(m.faces(), &[[0, 1, 2]]);
        let neg = read_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n".as_bytes()).unwrap();
        assert_eq!(neg.faces(), &[[0, 1, 2]]);
    }

    #[test]
    fn obj_errors_name_the_line() {
        let zero = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n";
        assert!(matches!(
            read_obj(zero.as_bytes()),
            Err(MeshError::Parse { line: 4, .. })
        ));
        let quad = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        assert!(matches!(
            read_obj(quad.as_bytes()),
            Err(MeshError::Parse { line: 5, .. })
        ));
        let range = "v 0 0 0\nv 1 0 0\nv 0 1 0\n\nf 1 2 9\n";
        assert!(matches!(
            read_obj(range.as_bytes()),
            Err(MeshError::Parse { line: 5, .. })
        ));
    }

    #[test]
    fn ply_layout() {
        let c = sample_surface(&make_icosphere(1).unwrap(), 5, 1).unwrap();
        let mut buf = Vec::new();
        write_ply(&c, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[2], "element vertex 5");
        assert_eq!(lines[9], "end_header");
        assert_eq!(lines.len(), 15);
        assert_eq!(lines[10].split_whitespace().count(), 6);
        assert!(write_ply(&PointCloud::from_points(vec![[0.0; 3]]), Vec::new()).is_err());
    }

    #[test]
    fn cloud_bin_round_trip() {
        let pts = vec![[1.5, -2.0, 3.25], [0.1, 0.2, 0.3]];
        let mut buf = Vec::new();
        write_points_bin(&pts, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 48);
        assert_eq!(&buf[..8], CLOUD_MAGIC);
        assert_eq!(read_points_bin(&buf[..]).unwrap(), pts);
        assert!(read_points_bin(&buf[..40]).is_err());
    }
}
