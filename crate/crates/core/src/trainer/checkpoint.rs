use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::{MetricRecord, Phase, TrainConfig};
use crate::nn::{ParamStore, Role};
use crate::xnetplus::{ModelConfig, XNetPlus};
use crate::{Error, Result};

const META_KEY: &str = "wavecp";

/// Full training state: both networks, optimizer velocity and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub student: ParamStore<f32>,
    pub teacher: ParamStore<f32>,
    /// SGD velocity per parameter; empty for buffers.
    pub velocity: Vec<Vec<f32>>,
    pub phase: Phase,
    /// Completed iterations of the current phase.
    pub iteration: usize,
    pub history: Vec<MetricRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    model: ModelConfig,
    train: TrainConfig,
    phase: Phase,
    iteration: usize,
    history: Vec<MetricRecord>,
}

fn le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

impl Checkpoint {
    /// Fresh student from `(model, train.seed)`, copied into the teacher.
    pub fn init(model: &ModelConfig, train: &TrainConfig) -> Result<(XNetPlus, Checkpoint)> {
        train.validate()?;
        let (arch, student) = XNetPlus::build(model, train.seed)?;
        let velocity = zero_velocity(&student);
        Ok((
            arch,
            Checkpoint {
                model: model.clone(),
                train: train.clone(),
                teacher: student.clone(),
                student,
                velocity,
                phase: Phase::Pretrain,
                iteration: 0,
                history: Vec::new(),
            },
        ))
    }

    /// Architecture matching this checkpoint's parameters.
    pub fn architecture(&self) -> Result<XNetPlus> {
        let (arch, fresh) = XNetPlus::build(&self.model, 0)?;
        fresh.check_same_layout(&self.student)?;
        fresh.check_same_layout(&self.teacher)?;
        Ok(arch)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.student.check_same_layout(&self.teacher)?;
        let mut owned: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for (k, (s, t)) in self.student.iter().zip(self.teacher.iter()).enumerate() {
            owned.push((format!("student.{}", s.name), s.shape.clone(), le_bytes(&s.data)));
            owned.push((format!("teacher.{}", t.name), t.shape.clone(), le_bytes(&t.data)));
            if s.role == Role::Trainable {
                owned.push((format!("velocity.{}", s.name), s.shape.clone(), le_bytes(&self.velocity[k])));
            }
        }
        let views = owned
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(Dtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Format(format!("checkpoint tensor `{name}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let meta = Meta {
            model: self.model.clone(),
            train: self.train.clone(),
            phase: self.phase,
            iteration: self.iteration,
            history: self.history.clone(),
        };
        let meta = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
        let info = Some(HashMap::from([(META_KEY.to_string(), meta)]));
        safetensors::tensor::serialize(views, &info).map_err(|e| Error::Format(format!("checkpoint: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| Error::Format(format!("checkpoint: {m}"));
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta_json = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| bad("missing configuration metadata".into()))?;
        let meta: Meta = serde_json::from_str(meta_json).map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let tensors = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let (_, template) = XNetPlus::build(&meta.model, 0)?;

        let read = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let view = tensors.tensor(name).map_err(|_| bad(format!("missing tensor `{name}`")))?;
            if view.dtype() != Dtype::F32 || view.shape() != shape {
                return Err(bad(format!(
                    "tensor `{name}` is {:?} {:?}, expected F32 {shape:?}",
                    view.dtype(),
                    view.shape()
                )));
            }
            Ok(view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let mut student = template.clone();
        let mut teacher = template;
        let mut velocity = Vec::with_capacity(student.len());
        for (s, t) in student.iter_mut().zip(teacher.iter_mut()) {
            s.data = read(&format!("student.{}", s.name), &s.shape)?;
            t.data = read(&format!("teacher.{}", t.name), &t.shape)?;
            velocity.push(if s.role == Role::Trainable {
                read(&format!("velocity.{}", s.name), &s.shape)?
            } else {
                Vec::new()
            });
        }
        let expected = 2 * student.len() + velocity.iter().filter(|v| !v.is_empty()).count();
        if tensors.len() != expected {
            return Err(bad(format!("{} tensors, expected {expected}", tensors.len())));
        }
        Ok(Checkpoint {
            model: meta.model,
            train: meta.train,
            student,
            teacher,
            velocity,
            phase: meta.phase,
            iteration: meta.iteration,
            history: meta.history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn zero_velocity(params: &ParamStore<f32>) -> Vec<Vec<f32>> {
    params
        .iter()
        .map(|p| match p.role {
            Role::Trainable => vec![0.0; p.data.len()],
            Role::Buffer => Vec::new(),
        })
        .collect()
}
