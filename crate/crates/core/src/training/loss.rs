use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

/// Soft Dice loss `1 − (2·Σ p·g + ε) / (Σ p + Σ g + ε)` over all elements.
pub fn dice_loss(pred_prob: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    if pred_prob.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "dice_loss: prediction {:?} vs ground truth {:?}",
            pred_prob.dims(),
            gt.dims()
        )));
    }
    let inter = (pred_prob * gt)?.sum_all()?;
    let denom = (pred_prob.sum_all()? + gt.sum_all()?)?;
    let ratio = ((inter * 2.0)? + smooth)?.div(&(denom + smooth)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Mean Dice loss of the sigmoid of each level's logits against one target.
/// `logits: [levels, m, m]`, `gt: [m, m]`.
pub fn multi_mask_loss(logits: &Tensor, gt: &Tensor, smooth: f64) -> Result<Tensor> {
    let levels = logits.dim(0)?;
    let mut total: Option<Tensor> = None;
    for i in 0..levels {
        let p = candle_nn::ops::sigmoid(&logits.get(i)?)?;
        let l = dice_loss(&p, gt, smooth)?;
        total = Some(match total {
            Some(t) => (t + l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Shape("no mask levels".into()))?;
    Ok((total / levels as f64)?)
}

/// Ground truth at logit resolution: area average per cell, then `> ½`.
pub fn downsample_target(gt_canvas: &BinaryMask, size: usize) -> Result<Tensor> {
    let low = gt_canvas.downsample_majority(size, size);
    Ok(Tensor::from_vec(low.to_f32(), (size, size), &Device::Cpu)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::DType;

    fn t(v: &[f32]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn scalar(x: &Tensor) -> f64 {
        x.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn dice_examples() {
        let g = t(&[1.0, 1.0, 0.0, 0.0]);
        // perfect overlap, ε → 0
        assert!(scalar(&dice_loss(&g, &g, 1e-9).unwrap()).abs() < 1e-6);
        // disjoint
        let p = t(&[0.0, 0.0, 1.0, 1.0]);
        assert!((scalar(&dice_loss(&p, &g, 1e-9).unwrap()) - 1.0).abs() < 1e-6);
        // areas 2 and 2, overlap 1: 1 − 2/4
        let p = t(&[0.0, 1.0, 1.0, 0.0]);
        assert!((scalar(&dice_loss(&p, &g, 0.0).unwrap()) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn dice_shape_mismatch() {
        assert!(dice_loss(&t(&[1.0, 0.0]), &t(&[1.0]), 1.0).is_err());
    }

    #[test]
    fn multi_mask_is_mean_of_levels() {
        let big = 40.0f32;
        let gt = Tensor::new(&[[1f32, 1.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        // level losses ≈ 0, 0.5, 1 (sigmoid saturated, ε tiny)
        let perfect = [[big, big], [-big, -big]];
        let half = [[-big, big], [big, -big]];
        let wrong = [[-big, -big], [big, big]];
        let logits = Tensor::new(&[perfect, half, wrong], &Device::Cpu).unwrap();
        let l = scalar(&multi_mask_loss(&logits, &gt, 1e-9).unwrap());
        assert!((l - 0.5).abs() < 1e-5, "{l}");
        let permuted = Tensor::new(&[wrong, perfect, half], &Device::Cpu).unwrap();
        let lp = scalar(&multi_mask_loss(&permuted, &gt, 1e-9).unwrap());
        assert!((l - lp).abs() < 1e-7);
        let same = Tensor::new(&[perfect, perfect, perfect], &Device::Cpu).unwrap();
        assert!(scalar(&multi_mask_loss(&same, &gt, 1e-9).unwrap()) < 1e-6);
    }

    #[test]
    fn target_downsampling() {
        let gt = BinaryMask::from_fn(8, 8, |x, y| x < 4 && y < 2);
        let low = downsample_target(&gt, 4).unwrap().to_vec2::<f32>().unwrap();
        assert_eq!(low[0], vec![1.0, 1.0, 0.0, 0.0]);
        assert!(low[1..].iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }
}
