//! JSONL readers and writers for scene pairs and generated points.
//!
//! Scene records: `{"scene_id": str, "source": [[x,y,z,rcs,vx,vy],...], "target": [...]}`.
//! Generated records: `{"scene_id": str, "points": [[x,y,rcs,vx,vy,score],...]}`.
//! One record per line; every number is a JSON double.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::types::{GeneratedPoint, RadarPoint, ScenePair, SceneGeneration};

#[derive(Serialize)]
struct SceneRecord<'a> {
    scene_id: &'a str,
    source: Vec<[f64; 6]>,
    target: Vec<[f64; 6]>,
}

#[derive(Serialize)]
struct PointsRecord<'a> {
    scene_id: &'a str,
    points: Vec<[f64; 6]>,
}

enum FieldError {
    Parse(String),
    Validation(String),
}

fn parse_rows(value: Option<&Value>, field: &str) -> std::result::Result<Vec<[f64; 6]>, FieldError> {
    let rows = value
        .ok_or_else(|| FieldError::Parse(format!("missing field `{field}`")))?
        .as_array()
        .ok_or_else(|| FieldError::Parse(format!("`{field}` is not an array")))?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| FieldError::Parse(format!("`{field}[{i}]` is not an array")))?;
        if row.len() != 6 {
            return Err(FieldError::Parse(format!(
                "`{field}[{i}]` has {} values, expected 6",
                row.len()
            )));
        }
        let mut vals = [0.0; 6];
        for (k, v) in row.iter().enumerate() {
            let x = match v {
                Value::Number(n) => n
                    .as_f64()
                    .ok_or_else(|| FieldError::Parse(format!("`{field}[{i}][{k}]` is not a double")))?,
                // Non-finite values cannot be JSON numbers; accept their
                // spelled-out forms only to report them as invalid data.
                Value::String(s) => s.trim().parse::<f64>().map_err(|_| {
                    FieldError::Parse(format!("`{field}[{i}][{k}]` is not a number: {s:?}"))
                })?,
                other => {
                    return Err(FieldError::Parse(format!(
                        "`{field}[{i}][{k}]` is not a number: {other}"
                    )))
                }
            };
            if !x.is_finite() {
                return Err(FieldError::Validation(format!(
                    "`{field}[{i}][{k}]` is not finite ({x})"
                )));
            }
            vals[k] = x;
        }
        out.push(vals);
    }
    Ok(out)
}

fn read_records<T>(
    path: &Path,
    mut parse: impl FnMut(&serde_json::Map<String, Value>) -> std::result::Result<T, FieldError>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: "record is not a JSON object".into(),
        })?;
        let record = parse(obj).map_err(|e| match e {
            FieldError::Parse(message) => Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message,
            },
            FieldError::Validation(message) => Error::Validation {
                path: path.to_path_buf(),
                line: line_no,
                message,
            },
        })?;
        out.push(record);
    }
    Ok(out)
}

fn scene_id(obj: &serde_json::Map<String, Value>) -> std::result::Result<String, FieldError> {
    obj.get("scene_id")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| FieldError::Parse("missing string field `scene_id`".into()))
}

pub fn read_scene_file(path: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    read_records(path.as_ref(), |obj| {
        let id = scene_id(obj)?;
        let cloud = |field: &str| -> std::result::Result<Vec<RadarPoint>, FieldError> {
            Ok(parse_rows(obj.get(field), field)?
                .into_iter()
                .map(RadarPoint::from_array)
                .collect())
        };
        let source = cloud("source")?;
        let target = cloud("target")?;
        Ok(ScenePair::new(id, source, target))
    })
}

pub fn read_points_file(path: impl AsRef<Path>) -> Result<Vec<SceneGeneration>> {
    read_records(path.as_ref(), |obj| {
        let id = scene_id(obj)?;
        let rows = parse_rows(obj.get("points"), "points")?;
        let points: Vec<GeneratedPoint> = rows.into_iter().map(GeneratedPoint::from_array).collect();
        if let Some((i, p)) = points.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(&p.score)) {
            return Err(FieldError::Validation(format!(
                "`points[{i}]` score {} outside [0, 1]",
                p.score
            )));
        }
        Ok(SceneGeneration {
            scene_id: id,
            points,
        })
    })
}

fn write_lines<T: Serialize>(path: &Path, records: impl Iterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("{what} contains a non-finite value")))
    }
}

pub fn write_scene_file(pairs: &[ScenePair], path: impl AsRef<Path>) -> Result<()> {
    for pair in pairs {
        for p in pair.source.points.iter().chain(&pair.target.points) {
            check_finite(&p.to_array(), &format!("scene {}", pair.scene_id))?;
        }
    }
    write_lines(
        path.as_ref(),
        pairs.iter().map(|p| SceneRecord {
            scene_id: &p.scene_id,
            source: p.source.points.iter().map(RadarPoint::to_array).collect(),
            target: p.target.points.iter().map(RadarPoint::to_array).collect(),
        }),
    )
}

pub fn write_points_file(scenes: &[SceneGeneration], path: impl AsRef<Path>) -> Result<()> {
    for s in scenes {
        for p in &s.points {
            check_finite(&p.to_array(), &format!("scene {}", s.scene_id))?;
        }
    }
    write_lines(
        path.as_ref(),
        scenes.iter().map(|s| PointsRecord {
            scene_id: &s.scene_id,
            points: s.points.iter().map(GeneratedPoint::to_array).collect(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scratch() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn empty_file_reads_as_no_scenes() {
        let dir = scratch();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_scene_file(&path).unwrap().is_empty());
    }

    #[test]
    fn single_point_record() {
        let dir = scratch();
        let path = dir.path().join("one.jsonl");
        std::fs::write(&path, r#"{"scene_id":"a","source":[[1,2,0,5,0,0]],"target":[]}"#).unwrap();
        let scenes = read_scene_file(&path).unwrap();
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].source.points[0].x, 1.0);
        assert_eq!(scenes[0].source.points[0].y, 2.0);
        assert!(scenes[0].target.is_empty());
    }

    #[test]
    fn nan_is_a_validation_error_with_line_number() {
        let dir = scratch();
        let path = dir.path().join("nan.jsonl");
        std::fs::write(
            &path,
            "{\"scene_id\":\"ok\",\"source\":[],\"target\":[]}\n{\"scene_id\":\"bad\",\"source\":[[1,2,0,\"NaN\",0,0]],\"target\":[]}\n",
        )
        .unwrap();
        match read_scene_file(&path) {
            Err(Error::Validation { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line() {
        let dir = scratch();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"scene_id\":\"a\",\"source\":[],\"target\":[]}\n{not json\n").unwrap();
        match read_scene_file(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_arity_is_parse_error() {
        let dir = scratch();
        let path = dir.path().join("arity.jsonl");
        std::fs::write(&path, r#"{"scene_id":"a","source":[[1,2,3]],"target":[]}"#).unwrap();
        assert!(matches!(read_scene_file(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn empty_list_writes_empty_file_and_empty_source_is_kept() {
        let dir = scratch();
        let path = dir.path().join("out.jsonl");
        write_scene_file(&[], &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "");

        let pair = ScenePair::new("s", vec![], vec![RadarPoint::new(1.0, 2.0, 0.0, 3.0, 0.5, -0.5)]);
        write_scene_file(&[pair], &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"source\":[]"));
    }

    #[test]
    fn generated_points_round_trip() {
        let dir = scratch();
        let path = dir.path().join("pts.jsonl");
        let points: Vec<GeneratedPoint> = (0..5)
            .map(|i| {
                let f = i as f64;
                GeneratedPoint::from_array([f * 1.1, -f / 3.0, 7.25 - f, 0.1 * f, -0.2, if i == 4 { 1.0 } else { 0.2 * f }])
            })
            .collect();
        let scenes = vec![
            SceneGeneration {
                scene_id: "a".into(),
                points: points.clone(),
            },
            SceneGeneration {
                scene_id: "b".into(),
                points: vec![],
            },
        ];
        write_points_file(&scenes, &path).unwrap();
        let back = read_points_file(&path).unwrap();
        assert_eq!(back, scenes);
        assert_eq!(back[0].points[4].score, 1.0);
    }

    #[test]
    fn writer_rejects_nan() {
        let dir = scratch();
        let pair = ScenePair::new("s", vec![RadarPoint::new(f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0)], vec![]);
        assert!(write_scene_file(&[pair], dir.path().join("x.jsonl")).is_err());
    }
}
