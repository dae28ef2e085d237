//! Checkpoint directories: one MVLT file per parameter, a manifest and the run config.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::io::{decode_mvlt, encode_mvlt};
use crate::layers::Parameters;
use crate::model::Model;
use crate::scalar::{Dtype, Scalar};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CONFIG_FILE: &str = "config.cfg";
pub const MANIFEST_HEADER: &str = "# name shape dtype file";

fn shape_string(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

/// Writes `model` and `config` into `dir`, creating it if needed.
pub fn save_checkpoint<T: Scalar>(dir: impl AsRef<Path>, model: &Model<T>, config: &TrainConfig) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut stored = config.clone();
    stored.model = model.config;
    stored.precision = T::DTYPE;
    let mut manifest = format!("{MANIFEST_HEADER}\n");
    let mut result = Ok(());
    model.visit("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        let file = format!("{name}.mvlt");
        writeln!(manifest, "{name} {} {} {file}", shape_string(t.shape()), T::DTYPE).expect("writing to a string");
        let path = dir.join(&file);
        result = std::fs::write(&path, encode_mvlt(t)).map_err(|e| Error::io(&path, e));
    });
    result?;
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(MANIFEST_FILE, &manifest)?;
    write(CONFIG_FILE, &stored.to_text())
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    file: String,
}

fn parse_manifest(text: &str) -> Result<Vec<Entry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|line| {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [name, shape, dtype, file] = parts[..] else {
                return Err(Error::format("manifest", format!("expected 4 fields in {line:?}")));
            };
            let shape = shape
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::format("manifest", format!("bad shape in {line:?}")))?;
            let dtype =
                Dtype::parse(dtype).ok_or_else(|| Error::format("manifest", format!("bad dtype in {line:?}")))?;
            if file.contains('/') || file.contains("..") {
                return Err(Error::format(
                    "manifest",
                    format!("file outside checkpoint in {line:?}"),
                ));
            }
            Ok(Entry {
                name: name.to_string(),
                shape,
                dtype,
                file: file.to_string(),
            })
        })
        .collect()
}

/// Loads a checkpoint into precision `T`; values are cast if stored in another precision.
pub fn load_checkpoint<T: Scalar>(dir: impl AsRef<Path>) -> Result<(Model<T>, TrainConfig)> {
    let dir = dir.as_ref();
    let config = TrainConfig::load(dir.join(CONFIG_FILE))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let entries = parse_manifest(&text)?;
    let mut model = Model::<T>::new(config.model, 0)?;
    let expected: Vec<(String, Vec<usize>)> = crate::layers::named_parameters(&model)
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    if expected.len() != entries.len() {
        return Err(Error::format(
            "manifest",
            format!("{} entries, model has {} parameters", entries.len(), expected.len()),
        ));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for (entry, (name, shape)) in entries.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::format(
                "manifest",
                format!(
                    "entry {} {:?} does not match parameter {name} {shape:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let path = dir.join(&entry.file);
        let stored = decode_mvlt(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
        if stored.shape() != shape.as_slice() || stored.dtype() != entry.dtype {
            return Err(Error::format(
                "tensor",
                format!(
                    "{} holds {} {:?}, manifest says {} {shape:?}",
                    path.display(),
                    stored.dtype(),
                    stored.shape(),
                    entry.dtype
                ),
            ));
        }
        tensors.push(stored.into_tensor::<T>());
    }
    let mut it = tensors.into_iter();
    model.visit_mut("", &mut |_, t| *t = it.next().expect("counted above"));
    Ok((model, config))
}
