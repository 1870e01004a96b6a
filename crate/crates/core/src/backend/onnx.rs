//! Portable model files executed with tract.
//!
//! Segmenters and localizers take `[1, 1, H, W]` float32 intensities and
//! return `H * W` foreground probabilities, either as `[1, 1, H, W]` or as
//! two-channel logits `[1, 2, H, W]` (softmax, channel 1 kept). Classifiers
//! take the composed input flattened to `[1, S * 2 * 3, H, W]` and return a
//! single probability or two logits.

use super::{check_probability_map, BackendError, BinaryClassifier, ClassifyContext, Result};
use super::{SliceContext, SlicePredictor};
use crate::cascade::ClassifierInput;
use crate::grid::Grid2D;
use std::path::Path;
use tract_onnx::prelude::*;

type Plan = std::sync::Arc<TypedRunnableModel>;

fn load(path: &Path, shape: &[usize]) -> Result<Plan> {
    let err = |e: TractError| BackendError::Load {
        path: path.to_path_buf(),
        message: format!("{e:#}"),
    };
    tract_onnx::onnx()
        .model_for_path(path)
        .and_then(|m| m.with_input_fact(0, f32::fact(shape).into()))
        .and_then(|m| m.into_optimized())
        .and_then(|m| m.into_runnable())
        .map_err(err)
}

fn run(name: &str, plan: &Plan, shape: &[usize], data: Vec<f32>) -> Result<Vec<f32>> {
    let err = |e: TractError| BackendError::Inference {
        backend: name.to_string(),
        message: format!("{e:#}"),
    };
    let input = Tensor::from_shape(shape, &data).map_err(err)?;
    let out = plan.run(tvec!(input.into())).map_err(err)?;
    let view = out[0].to_plain_array_view::<f32>().map_err(err)?;
    Ok(view.iter().copied().collect())
}

fn softmax1(a: f32, b: f32) -> f64 {
    let m = a.max(b);
    let (ea, eb) = (((a - m) as f64).exp(), ((b - m) as f64).exp());
    eb / (ea + eb)
}

pub struct OnnxPredictor {
    name: String,
    plan: Plan,
    dims: (usize, usize),
}

impl OnnxPredictor {
    pub fn load(path: &Path, dims: (usize, usize)) -> Result<Self> {
        Ok(Self {
            name: format!("model:{}", path.display()),
            plan: load(path, &[1, 1, dims.1, dims.0])?,
            dims,
        })
    }
}

impl SlicePredictor for OnnxPredictor {
    fn name(&self) -> &str {
        &self.name
    }

    fn predict(&self, image: &Grid2D, _ctx: &SliceContext<'_>) -> Result<Grid2D> {
        let (w, h) = self.dims;
        if image.dims() != self.dims {
            return Err(BackendError::BadOutputShape {
                backend: self.name.clone(),
                got: vec![image.width(), image.height()],
                expected: vec![w, h],
            });
        }
        let data = image.data().iter().map(|&v| v as f32).collect();
        let out = run(&self.name, &self.plan, &[1, 1, h, w], data)?;
        let n = w * h;
        let probs: Vec<f64> = if out.len() == n {
            out.iter().map(|&v| v as f64).collect()
        } else if out.len() == 2 * n {
            (0..n).map(|i| softmax1(out[i], out[n + i])).collect()
        } else {
            return Err(BackendError::BadOutputShape {
                backend: self.name.clone(),
                got: vec![out.len()],
                expected: vec![n],
            });
        };
        let grid = Grid2D::new(w, h, probs, image.spacing()).map_err(|e| BackendError::Inference {
            backend: self.name.clone(),
            message: e.to_string(),
        })?;
        check_probability_map(&self.name, grid, self.dims)
    }
}

pub struct OnnxClassifier {
    name: String,
    plan: Plan,
    shape: [usize; 4],
}

impl OnnxClassifier {
    pub fn load(path: &Path, input_shape: [usize; 5]) -> Result<Self> {
        let [s, p, c, h, w] = input_shape;
        let shape = [1, s * p * c, h, w];
        Ok(Self {
            name: format!("model:{}", path.display()),
            plan: load(path, &shape)?,
            shape,
        })
    }
}

impl BinaryClassifier for OnnxClassifier {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, input: &ClassifierInput, _ctx: &ClassifyContext<'_>) -> Result<f64> {
        let [s, p, c, h, w] = input.shape();
        if [1, s * p * c, h, w] != self.shape {
            return Err(BackendError::BadOutputShape {
                backend: self.name.clone(),
                got: input.shape().to_vec(),
                expected: self.shape.to_vec(),
            });
        }
        let data = input.data().iter().map(|&v| v as f32).collect();
        let out = run(&self.name, &self.plan, &self.shape, data)?;
        match out[..] {
            [p] if (0.0..=1.0).contains(&p) => Ok(p as f64),
            [a, b] => Ok(softmax1(a, b)),
            _ => Err(BackendError::BadOutputShape {
                backend: self.name.clone(),
                got: vec![out.len()],
                expected: vec![1],
            }),
        }
    }
}
