//! Versioned plain-text model checkpoints.
//!
//! ```text
//! bnmatch-checkpoint 1
//! seed <u64>
//! split_index <usize>
//! classifier_bn none|frozen|batch
//! layers <n>
//! dense <in> <out> <trainable 0|1>
//! weights <in*out values>
//! bias <out values>
//! batchnorm <channels> <width> <trainable> <eps> <momentum>
//! running_mean ...
//! running_var ...
//! scale ...
//! shift ...
//! tanh <trainable>
//! softmax <trainable>
//! end
//! ```
//!
//! Floats use Rust's shortest round-trip decimal form, so write → read is
//! bit-exact for every finite `f64`.

use std::fmt::Write as _;
use std::path::Path;

use super::batchnorm::BnState;
use super::dense::{DenseLayer, SoftmaxLayer, TanhLayer};
use super::model::{ClassifierBn, Layer, Model};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

const MAGIC: &str = "bnmatch-checkpoint";
const VERSION: u32 = 1;

fn push_values(out: &mut String, key: &str, values: &[f64]) {
    out.push_str(key);
    for v in values {
        write!(out, " {v}").expect("writing to a String cannot fail");
    }
    out.push('\n');
}

pub fn to_string(model: &Model) -> String {
    let mut s = String::new();
    writeln!(s, "{MAGIC} {VERSION}").unwrap();
    writeln!(s, "seed {}", model.seed).unwrap();
    writeln!(s, "split_index {}", model.split_index).unwrap();
    let cbn = match model.classifier_bn {
        None => "none",
        Some(ClassifierBn::Frozen) => "frozen",
        Some(ClassifierBn::Batch) => "batch",
    };
    writeln!(s, "classifier_bn {cbn}").unwrap();
    writeln!(s, "layers {}", model.layers.len()).unwrap();
    for (layer, &train) in model.layers.iter().zip(&model.trainable) {
        let t = u8::from(train);
        match layer {
            Layer::Dense(d) => {
                writeln!(s, "dense {} {} {t}", d.inputs(), d.outputs()).unwrap();
                push_values(&mut s, "weights", d.weights.data());
                push_values(&mut s, "bias", d.bias.data());
            }
            Layer::BatchNorm(bn) => {
                writeln!(
                    s,
                    "batchnorm {} {} {t} {} {}",
                    bn.channels, bn.width, bn.eps, bn.momentum
                )
                .unwrap();
                push_values(&mut s, "running_mean", bn.running_mean.data());
                push_values(&mut s, "running_var", bn.running_var.data());
                push_values(&mut s, "scale", bn.scale.data());
                push_values(&mut s, "shift", bn.shift.data());
            }
            Layer::Tanh(_) => writeln!(s, "tanh {t}").unwrap(),
            Layer::Softmax(_) => writeln!(s, "softmax {t}").unwrap(),
        }
    }
    s.push_str("end\n");
    s
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_fields(&mut self) -> Result<Vec<&'a str>> {
        for (i, l) in self.inner.by_ref() {
            self.line = i + 1;
            let fields: Vec<&str> = l.split_ascii_whitespace().collect();
            if !fields.is_empty() {
                return Ok(fields);
            }
        }
        Err(self.err("unexpected end of checkpoint"))
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let f = self.next_fields()?;
        if f[0] != key {
            return Err(self.err(format!("expected `{key}`, found `{}`", f[0])));
        }
        Ok(f[1..].to_vec())
    }

    fn parse<T: std::str::FromStr>(&self, s: &str) -> Result<T> {
        s.parse()
            .map_err(|_| self.err(format!("cannot parse `{s}`")))
    }

    fn values(&mut self, key: &str, n: usize) -> Result<Tensor> {
        let f = self.keyed(key)?;
        if f.len() != n {
            return Err(self.err(format!("`{key}` has {} values, expected {n}", f.len())));
        }
        let data = f
            .iter()
            .map(|v| self.parse::<f64>(v))
            .collect::<Result<Vec<_>>>()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(self.err(format!("`{key}` contains a non-finite value")));
        }
        Ok(Tensor::vector(data))
    }

    fn flag(&self, s: &str) -> Result<bool> {
        match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(self.err(format!("expected 0 or 1, found `{s}`"))),
        }
    }
}

pub fn from_str(text: &str) -> Result<Model> {
    let mut r = Lines {
        inner: text.lines().enumerate(),
        line: 0,
    };
    let header = r.next_fields()?;
    if header.len() != 2 || header[0] != MAGIC {
        return Err(r.err("not a bnmatch checkpoint"));
    }
    let version: u32 = r.parse(header[1])?;
    if version != VERSION {
        return Err(r.err(format!("unsupported checkpoint version {version}")));
    }
    let seed: u64 = {
        let f = r.keyed("seed")?;
        r.parse(f.first().copied().unwrap_or(""))?
    };
    let split_index: usize = {
        let f = r.keyed("split_index")?;
        r.parse(f.first().copied().unwrap_or(""))?
    };
    let classifier_bn = match r.keyed("classifier_bn")?.first().copied() {
        Some("none") => None,
        Some("frozen") => Some(ClassifierBn::Frozen),
        Some("batch") => Some(ClassifierBn::Batch),
        _ => return Err(r.err("classifier_bn must be none, frozen or batch")),
    };
    let count: usize = {
        let f = r.keyed("layers")?;
        r.parse(f.first().copied().unwrap_or(""))?
    };

    let mut layers = Vec::with_capacity(count);
    let mut trainable = Vec::with_capacity(count);
    for _ in 0..count {
        let f = r.next_fields()?;
        match (f[0], f.len()) {
            ("dense", 4) => {
                let (inp, out): (usize, usize) = (r.parse(f[1])?, r.parse(f[2])?);
                trainable.push(r.flag(f[3])?);
                if inp == 0 || out == 0 {
                    return Err(r.err("dense layer with zero width"));
                }
                let w = r.values("weights", inp * out)?;
                let b = r.values("bias", out)?;
                let w = Tensor::new(vec![inp, out], w.into_data())?;
                layers.push(Layer::Dense(DenseLayer::from_parameters(w, b)?));
            }
            ("batchnorm", 6) => {
                let (c, w): (usize, usize) = (r.parse(f[1])?, r.parse(f[2])?);
                trainable.push(r.flag(f[3])?);
                let (eps, momentum): (f64, f64) = (r.parse(f[4])?, r.parse(f[5])?);
                let mut bn = BnState::with_params(c, w, eps, momentum)
                    .map_err(|e| r.err(e.to_string()))?;
                bn.running_mean = r.values("running_mean", c)?;
                bn.running_var = r.values("running_var", c)?;
                if bn.running_var.data().iter().any(|&v| v < 0.0) {
                    return Err(r.err("negative running variance"));
                }
                bn.scale = r.values("scale", c)?;
                bn.shift = r.values("shift", c)?;
                layers.push(Layer::BatchNorm(bn));
            }
            ("tanh", 2) => {
                trainable.push(r.flag(f[1])?);
                layers.push(Layer::Tanh(TanhLayer::default()));
            }
            ("softmax", 2) => {
                trainable.push(r.flag(f[1])?);
                layers.push(Layer::Softmax(SoftmaxLayer::default()));
            }
            (kind, _) => return Err(r.err(format!("malformed layer record `{kind}`"))),
        }
    }
    if r.next_fields()? != ["end"] {
        return Err(r.err("expected `end`"));
    }
    let mut model = Model::new(layers, split_index, seed)?;
    model.trainable = trainable;
    model.classifier_bn = classifier_bn;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    write_atomic(path, to_string(model).as_bytes())
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_str(&text)
}
