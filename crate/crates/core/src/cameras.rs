//! Camera lists as JSON:
//! `{"images": [{"name", "width", "height", "fx", "fy", "cx", "cy", "qvec", "tvec"}]}`
//! with world-to-camera `qvec = [w, x, y, z]` and `tvec = [x, y, z]`.

use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde_json::{json, Map, Value};

use crate::camera::Camera;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NamedCamera {
    pub name: String,
    pub camera: Camera,
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn field<'a>(obj: &'a Map<String, Value>, at: &str, key: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| schema(format!("{at}.{key}"), "missing field"))
}

fn number(obj: &Map<String, Value>, at: &str, key: &str) -> Result<f64> {
    field(obj, at, key)?
        .as_f64()
        .ok_or_else(|| schema(format!("{at}.{key}"), "expected a number"))
}

fn dimension(obj: &Map<String, Value>, at: &str, key: &str) -> Result<u32> {
    field(obj, at, key)?
        .as_u64()
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| schema(format!("{at}.{key}"), "expected a non-negative integer"))
}

fn vector<const N: usize>(obj: &Map<String, Value>, at: &str, key: &str) -> Result<[f64; N]> {
    let p = format!("{at}.{key}");
    let arr = field(obj, at, key)?
        .as_array()
        .ok_or_else(|| schema(&p, "expected an array"))?;
    if arr.len() != N {
        return Err(schema(&p, format!("expected {N} numbers, found {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (i, v) in arr.iter().enumerate() {
        out[i] = v.as_f64().ok_or_else(|| schema(format!("{p}[{i}]"), "expected a number"))?;
    }
    Ok(out)
}

pub fn parse_cameras(doc: &Value) -> Result<Vec<NamedCamera>> {
    let images = doc
        .get("images")
        .ok_or_else(|| schema("images", "missing field"))?
        .as_array()
        .ok_or_else(|| schema("images", "expected an array"))?;
    images
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let at = format!("images[{i}]");
            let obj = entry.as_object().ok_or_else(|| schema(&at, "expected an object"))?;
            let name = field(obj, &at, "name")?
                .as_str()
                .ok_or_else(|| schema(format!("{at}.name"), "expected a string"))?
                .to_string();
            let width = dimension(obj, &at, "width")?;
            let height = dimension(obj, &at, "height")?;
            let fx = number(obj, &at, "fx")?;
            let fy = number(obj, &at, "fy")?;
            let cx = number(obj, &at, "cx")?;
            let cy = number(obj, &at, "cy")?;
            let q = vector::<4>(obj, &at, "qvec")?;
            let t = vector::<3>(obj, &at, "tvec")?;
            if q.iter().map(|v| v * v).sum::<f64>() == 0.0 {
                return Err(schema(format!("{at}.qvec"), "zero quaternion"));
            }
            let camera = Camera::new(width, height, fx, fy, cx, cy, q, Vector3::from(t))
                .map_err(|e| schema(&at, e.to_string()))?;
            Ok(NamedCamera { name, camera })
        })
        .collect()
}

pub fn load_cameras(path: &Path) -> Result<Vec<NamedCamera>> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let doc: Value = serde_json::from_str(&text).map_err(|e| schema(path.display().to_string(), e.to_string()))?;
    parse_cameras(&doc)
}

pub fn cameras_to_json(cams: &[NamedCamera]) -> Value {
    let images: Vec<Value> = cams
        .iter()
        .map(|n| {
            let c = &n.camera;
            json!({
                "name": n.name,
                "width": c.width,
                "height": c.height,
                "fx": c.fx,
                "fy": c.fy,
                "cx": c.cx,
                "cy": c.cy,
                "qvec": c.q_wc,
                "tvec": [c.t_wc.x, c.t_wc.y, c.t_wc.z],
            })
        })
        .collect();
    json!({ "images": images })
}

pub fn save_cameras(path: &Path, cams: &[NamedCamera]) -> Result<()> {
    let text = serde_json::to_string_pretty(&cameras_to_json(cams)).expect("plain JSON values");
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn entry() -> Value {
        json!({"name": "a", "width": 64, "height": 48, "fx": 50.0, "fy": 50.0, "cx": 32.0, "cy": 24.0,
               "qvec": [1, 0, 0, 0], "tvec": [0, 0, 0]})
    }

    #[test]
    fn identity_pose_looks_down_z() {
        let cams = parse_cameras(&json!({ "images": [entry()] })).unwrap();
        let c = &cams[0].camera;
        assert_relative_eq!(c.center(), Vector3::zeros());
        let p = c.project(&Vector3::new(0.0, 0.0, 2.0)).unwrap();
        assert_relative_eq!(p.x, 32.0);
        assert_relative_eq!(p.y, 24.0);
    }

    #[test]
    fn missing_field_names_its_path() {
        let mut e = entry();
        e.as_object_mut().unwrap().remove("fx");
        let err = parse_cameras(&json!({ "images": [e] })).unwrap_err();
        assert!(err.to_string().contains("images[0].fx"), "{err}");
        let mut e = entry();
        e["qvec"] = json!([1, 0, "x", 0]);
        let err = parse_cameras(&json!({ "images": [entry(), e] })).unwrap_err();
        assert!(err.to_string().contains("images[1].qvec[2]"), "{err}");
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cams.json");
        let cam = Camera::look_at(40, 30, 33.0, Vector3::new(2.0, 1.0, 0.5), Vector3::zeros(), Vector3::z()).unwrap();
        let cams = vec![NamedCamera { name: "v0".into(), camera: cam }];
        save_cameras(&p, &cams).unwrap();
        assert_eq!(load_cameras(&p).unwrap(), cams);
    }
}
