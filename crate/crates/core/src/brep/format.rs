//! `.brj` exchange format: a JSON document with `vertices`, `edges` and
//! `faces` arrays. The writer is canonical: primitives sorted by id, one per
//! line, every coordinate printed with nine significant digits.

use std::fmt::Write as _;

use serde::Deserialize;

use super::{BRepModel, Edge, Face, FaceGrid, LoopEdge, SurfaceTag, Vec3, Vertex};
use crate::error::{Error, Result};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDoc {
    vertices: Vec<RawVertex>,
    edges: Vec<RawEdge>,
    faces: Vec<RawFace>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVertex {
    id: u32,
    position: [f64; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEdge {
    id: u32,
    endpoints: [u32; 2],
    samples: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFace {
    id: u32,
    surface_tag: SurfaceTag,
    #[serde(rename = "loop")]
    loop_edges: Vec<LoopEdge>,
    grid_size: usize,
    grid: Vec<f64>,
}

fn points(flat: &[f64], what: impl Fn() -> String) -> Result<Vec<Vec3>> {
    if !flat.len().is_multiple_of(3) {
        return Err(Error::invariant("row-major 3-vectors", format!("{}: length {} is not a multiple of 3", what(), flat.len())));
    }
    Ok(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
}

/// Parses and validates a `.brj` document.
pub fn parse_brep(text: &str) -> Result<BRepModel> {
    let raw: RawDoc = serde_json::from_str(text).map_err(|e| Error::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let vertices = raw
        .vertices
        .into_iter()
        .map(|v| Vertex {
            id: v.id,
            position: Vec3::from(v.position),
        })
        .collect();
    let edges = raw
        .edges
        .into_iter()
        .map(|e| {
            Ok(Edge {
                id: e.id,
                samples: points(&e.samples, || format!("edge {}", e.id))?,
                endpoints: e.endpoints,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let faces = raw
        .faces
        .into_iter()
        .map(|f| {
            let grid = FaceGrid::new(f.grid_size, points(&f.grid, || format!("face {}", f.id))?)
                .map_err(|e| Error::invariant("grid shape", format!("face {}: {e}", f.id)))?;
            Ok(Face {
                id: f.id,
                grid,
                loop_edges: f.loop_edges,
                surface_tag: f.surface_tag,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BRepModel::new(vertices, edges, faces)
}

pub(crate) fn fmt_num(out: &mut String, x: f64) {
    let x = if x == 0.0 { 0.0 } else { x };
    write!(out, "{x:.8e}").unwrap();
}

fn fmt_points<'a>(out: &mut String, pts: impl IntoIterator<Item = &'a Vec3>) {
    out.push('[');
    let mut first = true;
    for p in pts {
        for c in p.iter() {
            if !first {
                out.push(',');
            }
            first = false;
            fmt_num(out, *c);
        }
    }
    out.push(']');
}

/// Canonical, byte-deterministic serialization.
pub fn serialize_brep(model: &BRepModel) -> String {
    let mut out = String::from("{\n\"vertices\": [\n");
    for (k, v) in model.vertices().iter().enumerate() {
        write!(out, "{{\"id\":{},\"position\":", v.id).unwrap();
        fmt_points(&mut out, [&v.position]);
        out.push('}');
        out.push_str(if k + 1 < model.vertices().len() { ",\n" } else { "\n" });
    }
    out.push_str("],\n\"edges\": [\n");
    for (k, e) in model.edges().iter().enumerate() {
        write!(out, "{{\"id\":{},\"endpoints\":[{},{}],\"samples\":", e.id, e.endpoints[0], e.endpoints[1]).unwrap();
        fmt_points(&mut out, &e.samples);
        out.push('}');
        out.push_str(if k + 1 < model.edges().len() { ",\n" } else { "\n" });
    }
    out.push_str("],\n\"faces\": [\n");
    for (k, f) in model.faces().iter().enumerate() {
        let tag = match f.surface_tag {
            SurfaceTag::Planar => "planar",
            SurfaceTag::Cylindrical => "cylindrical",
            SurfaceTag::Freeform => "freeform",
        };
        write!(out, "{{\"id\":{},\"surface_tag\":\"{tag}\",\"loop\":[", f.id).unwrap();
        for (i, le) in f.loop_edges.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            write!(out, "{{\"edge\":{},\"forward\":{}}}", le.edge, le.forward).unwrap();
        }
        write!(out, "],\"grid_size\":{},\"grid\":", f.grid.size()).unwrap();
        fmt_points(&mut out, f.grid.points());
        out.push('}');
        out.push_str(if k + 1 < model.faces().len() { ",\n" } else { "\n" });
    }
    out.push_str("]\n}\n");
    out
}

/// Canonical form of a document: `serialize_brep(parse_brep(text))`.
pub fn canonical(text: &str) -> Result<String> {
    Ok(serialize_brep(&parse_brep(text)?))
}
