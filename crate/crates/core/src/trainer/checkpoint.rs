//! Checkpoint directories: parameters and bank as U2TN files plus a text manifest.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::memorybank::MemoryBank;
use crate::tensor::Tensor;

use super::model::{ModelShape, ToyModel};
use super::TrainState;

const MANIFEST: &str = "checkpoint.manifest";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub student: ToyModel,
    pub teacher: ToyModel,
    pub bank: MemoryBank,
    pub epoch: usize,
}

fn save_params(model: &ToyModel, path: &Path) -> Result<()> {
    Tensor::from_f64(vec![model.params().len()], model.params().to_vec())?.write(path)
}

fn load_params(shape: ModelShape, path: &Path) -> Result<ToyModel> {
    let t = Tensor::read(path)?;
    let params = t
        .to_f64_vec()
        .filter(|_| t.ndim() == 1)
        .ok_or_else(|| Error::Format(format!("{}: expected a 1-d float tensor", path.display())))?;
    ToyModel::from_params(shape, params)
}

pub fn save(dir: impl AsRef<Path>, state: &TrainState, cfg: &RunConfig) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_params(&state.student, &dir.join("student.u2tn"))?;
    save_params(&state.teacher, &dir.join("teacher.u2tn"))?;
    state.bank.save(dir.join("bank"))?;
    let s = state.student.shape();
    let manifest = format!(
        "u2pl-checkpoint 1\nepoch {}\ninput {}\nhidden {}\nclasses {}\nrepr {}\nstudent student.u2tn\nteacher teacher.u2tn\nbank bank\nconfig config.toml\n",
        state.epoch, s.input, s.hidden, s.classes, s.repr
    );
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml_string()).map_err(|e| Error::io(&path, e))
}

pub fn load(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("u2pl-checkpoint 1") {
        return Err(Error::Format(format!("{}: not a checkpoint manifest", path.display())));
    }
    let mut field = std::collections::HashMap::new();
    for line in lines {
        let (k, v) = line
            .split_once(' ')
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        field.insert(k, v);
    }
    let num = |k: &str| -> Result<usize> {
        field
            .get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("manifest missing numeric field {k}")))
    };
    let shape = ModelShape {
        input: num("input")?,
        hidden: num("hidden")?,
        classes: num("classes")?,
        repr: num("repr")?,
    };
    Ok(Checkpoint {
        student: load_params(shape, &dir.join("student.u2tn"))?,
        teacher: load_params(shape, &dir.join("teacher.u2tn"))?,
        bank: MemoryBank::load(dir.join("bank"))?,
        epoch: num("epoch")?,
    })
}
