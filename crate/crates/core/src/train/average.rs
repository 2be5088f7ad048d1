use std::path::Path;

use nmt_tensor::{Float, Tensor};

use crate::error::{usage, Result};
use crate::init::Checkpoint;

/// Elementwise mean of checkpoints that share a shape table; sums run in f64.
pub fn average<F: Float>(checkpoints: &[Checkpoint<F>]) -> Result<Checkpoint<F>> {
    let Some(first) = checkpoints.first() else {
        return usage("no checkpoints to average");
    };
    for (k, c) in checkpoints.iter().enumerate().skip(1) {
        if c.config != first.config {
            return usage(format!("checkpoint {k} has a different model config"));
        }
        let same = c.tensors.len() == first.tensors.len()
            && c.tensors.iter().zip(&first.tensors).all(|((n, t), (m, u))| n == m && t.shape() == u.shape());
        if !same {
            return usage(format!("checkpoint {k} has a different shape table"));
        }
    }
    let n = checkpoints.len() as f64;
    let tensors = first
        .tensors
        .iter()
        .enumerate()
        .map(|(i, (name, t))| {
            let mut sum = vec![0.0f64; t.len()];
            for c in checkpoints {
                for (s, x) in sum.iter_mut().zip(c.tensors[i].1.data()) {
                    *s += x.to_f64().unwrap_or(f64::NAN);
                }
            }
            let data = sum.into_iter().map(|s| F::lit(s / n)).collect();
            (name.clone(), Tensor::from_vec(t.shape(), data).expect("shape preserved"))
        })
        .collect();
    Ok(Checkpoint { config: first.config.clone(), tensors })
}

pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint<f32>> {
    let loaded = paths.iter().map(|p| Checkpoint::<f32>::load(p.as_ref())).collect::<Result<Vec<_>, _>>()?;
    average(&loaded)
}
