use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Relative L2 error `||pred - truth|| / ||truth||` over all cells and channels.
pub fn l2re(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let diff = pred.sub(truth)?;
    let denom = truth.norm();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("l2re of a zero-norm truth field"));
    }
    Ok(diff.norm() / denom)
}

/// RMSE normalized by the standard deviation of the truth field.
pub fn vrmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    let diff = pred.sub(truth)?;
    let n = truth.numel() as f64;
    let mean = truth.mean();
    let var = truth.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::UndefinedMetric("vrmse of a constant truth field"));
    }
    let mse = diff.data().iter().map(|v| v * v).sum::<f64>() / n;
    Ok((mse / var).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn field() -> Tensor {
        Rng::new(4).normal_tensor(&[1, 8, 8])
    }

    #[test]
    fn l2re_examples() {
        let t = field();
        assert_eq!(l2re(&t, &t).unwrap(), 0.0);
        assert!((l2re(&t.scale(2.0), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((l2re(&Tensor::zeros(t.shape()), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(l2re(&t, &Tensor::zeros(t.shape())).is_err());
    }

    #[test]
    fn vrmse_examples() {
        let t = field();
        assert_eq!(vrmse(&t, &t).unwrap(), 0.0);
        let mean = Tensor::full(t.shape(), t.mean());
        assert!((vrmse(&mean, &t).unwrap() - 1.0).abs() < 1e-12);
        let n = t.numel() as f64;
        let std = (t.data().iter().map(|v| (v - t.mean()).powi(2)).sum::<f64>() / n).sqrt();
        let shifted = t.map(|v| v + std);
        assert!((vrmse(&shifted, &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(vrmse(&t, &Tensor::full(t.shape(), 3.0)).is_err());
    }
}
