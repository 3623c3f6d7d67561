//! Model checkpoint: a textual header followed by little-endian f32 tensors.
//!
//! ```text
//! EVSEL-CKPT 1
//! mode=attention_bias
//! temperature=0.4
//! ...
//! tensor host.w1 32 64
//! ...
//! end
//! <f32 LE data, tensors in header order, row-major>
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::coverage::ClassAnchorWeights;
use crate::error::{Error, Result};
use crate::grounding::{BridgeInput, GroundingParams};
use crate::params::ParamGroup;
use crate::predictor::{InjectionMode, PredictorParams};
use crate::selector::SelectorParams;
use crate::training::Model;

pub const MAGIC: &str = "EVSEL-CKPT 1";

fn shapes(model: &Model) -> Vec<Vec<usize>> {
    let d2 = |a: &Array2<f64>| vec![a.nrows(), a.ncols()];
    let d1 = |a: &Array1<f64>| vec![a.len()];
    vec![
        d2(&model.host.w1),
        d1(&model.host.w2),
        d2(&model.host.wc),
        d1(&model.host.b),
        d2(&model.grounding.u),
        d2(&model.grounding.v),
        d2(&model.grounding.bridge),
        d2(&model.selector.w1),
        d1(&model.selector.b1),
        d1(&model.selector.w2),
        d1(&model.selector.b2),
        d2(&model.class_weights.raw),
    ]
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    let g = &model.grounding;
    let bridge_input = match g.bridge_input {
        BridgeInput::Raw => "raw",
        BridgeInput::Adapted => "adapted",
    };
    header += &format!("mode={}\n", model.mode.as_str());
    header += &format!("temperature={:?}\n", model.temperature);
    header += &format!("gamma={:?}\ndelta={:?}\n", g.gamma, g.delta);
    header += &format!("nu={:?}\n", model.selector.nu);
    header += &format!("bridge_input={bridge_input}\ngating={}\n", model.gating);
    for ((name, _), shape) in model.tensors().iter().zip(shapes(model)) {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        header += &format!("tensor {name} {}\n", dims.join(" "));
    }
    header += "end\n";
    let mut out = header.into_bytes();
    for (_, t) in model.tensors() {
        for &x in t {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    out
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Format {
        file: "checkpoint".into(),
        reason: reason.into(),
    }
}

fn take_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not utf-8"))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let mut pos = 0;
    if take_line(bytes, &mut pos)? != MAGIC {
        return Err(bad(format!("missing '{MAGIC}' header")));
    }
    let mut meta = BTreeMap::new();
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    loop {
        let line = take_line(bytes, &mut pos)?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_whitespace();
            let name = parts.next().ok_or_else(|| bad("tensor line without a name"))?;
            let dims = parts
                .map(|p| p.parse::<usize>().map_err(|_| bad(format!("bad dimension '{p}' for {name}"))))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name.to_string(), dims));
        } else {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("unrecognized line '{line}'")))?;
            meta.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| meta.get(k).map(String::as_str).ok_or_else(|| bad(format!("missing key '{k}'")));
    let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(format!("key '{k}' is not a number"))) };
    let mode: InjectionMode = get("mode")?.parse().map_err(bad)?;
    let bridge_input = match get("bridge_input")? {
        "raw" => BridgeInput::Raw,
        "adapted" => BridgeInput::Adapted,
        other => return Err(bad(format!("unknown bridge_input '{other}'"))),
    };
    let gating = match get("gating")? {
        "true" => true,
        "false" => false,
        other => return Err(bad(format!("gating must be true or false, got '{other}'"))),
    };

    let mut data: BTreeMap<String, (Vec<usize>, Vec<f64>)> = BTreeMap::new();
    for (name, dims) in tensors {
        let len: usize = dims.iter().product();
        let end = pos + 4 * len;
        if end > bytes.len() {
            return Err(bad(format!("data for {name} is truncated")));
        }
        let values = bytes[pos..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        pos = end;
        if data.insert(name.clone(), (dims, values)).is_some() {
            return Err(bad(format!("duplicate tensor {name}")));
        }
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    let mut take2 = |name: &str| -> Result<Array2<f64>> {
        let (dims, v) = data.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        match dims[..] {
            [r, c] => Ok(Array2::from_shape_vec((r, c), v).expect("length matches dims")),
            _ => Err(bad(format!("{name} must be 2-D"))),
        }
    };
    let host_w1 = take2("host.w1")?;
    let host_wc = take2("host.wc")?;
    let u = take2("grounding.u")?;
    let v = take2("grounding.v")?;
    let bridge = take2("grounding.bridge")?;
    let sel_w1 = take2("selector.w1")?;
    let raw = take2("class_weights.raw")?;
    let mut take1 = |name: &str| -> Result<Array1<f64>> {
        let (dims, v) = data.remove(name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        match dims[..] {
            [_] => Ok(Array1::from(v)),
            _ => Err(bad(format!("{name} must be 1-D"))),
        }
    };
    let host = PredictorParams {
        w1: host_w1,
        w2: take1("host.w2")?,
        wc: host_wc,
        b: take1("host.b")?,
    };
    let selector = SelectorParams {
        w1: sel_w1,
        b1: take1("selector.b1")?,
        w2: take1("selector.w2")?,
        b2: take1("selector.b2")?,
        nu: num("nu")?,
    };
    if let Some(name) = data.keys().next() {
        return Err(bad(format!("unexpected tensor {name}")));
    }
    let grounding = GroundingParams {
        u,
        v,
        bridge,
        gamma: num("gamma")?,
        delta: num("delta")?,
        bridge_input,
    };
    grounding.validate()?;
    let model = Model {
        host,
        grounding,
        selector,
        class_weights: ClassAnchorWeights { raw },
        mode,
        temperature: num("temperature")?,
        gating,
    };
    let consistent = model.selector.w1.ncols() == model.host.dim() + 2
        && model.selector.b1.len() == model.selector.w1.nrows()
        && model.selector.w2.len() == model.selector.w1.nrows()
        && model.selector.b2.len() == 1
        && model.grounding.dim() == model.host.dim()
        && model.class_weights.classes() == model.host.classes()
        && model.host.w2.len() == model.host.hidden()
        && model.host.wc.ncols() == model.host.dim()
        && model.host.b.len() == model.host.classes();
    if !consistent {
        return Err(bad("tensor shapes are inconsistent"));
    }
    if !(model.temperature > 0.0) {
        return Err(bad("temperature must be positive"));
    }
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Rounds every parameter through f32, matching a save/load cycle.
pub fn quantize(model: &Model) -> Model {
    let mut m = model.clone();
    for t in m.tensors_mut() {
        t.iter_mut().for_each(|x| *x = f64::from(*x as f32));
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TrainConfig;

    fn model() -> Model {
        Model::init(3, 6, 5, 6, &TrainConfig::default())
    }

    #[test]
    fn round_trip_matches_f32_rounding() {
        let m = model();
        let back = from_bytes(&to_bytes(&m)).unwrap();
        assert_eq!(back, quantize(&m));
        assert_eq!(to_bytes(&back), to_bytes(&m));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = to_bytes(&model());
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(from_bytes(b"NOPE\n").is_err());
        let text = String::from_utf8_lossy(&bytes).replace("mode=attention_bias", "mode=bogus");
        assert!(from_bytes(text.as_bytes()).is_err());
    }
}
