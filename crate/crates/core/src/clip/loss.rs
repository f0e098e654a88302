use un2clip_autograd::{Scalar, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

const UNIT_TOL: f64 = 1e-3;

/// Symmetric InfoNCE over `[B, D]` unit rows; `scale` is a one-element
/// variable multiplying the cosine logits.
pub fn infonce_graph<T: Scalar>(t: &mut Tape<T>, img: Var, txt: Var, scale: Var) -> Result<Var> {
    let b = t.shape(img)[0];
    if b < 2 {
        return Err(CoreError::Eval(format!(
            "contrastive loss needs a batch of at least 2, got {b}"
        )));
    }
    let sim = t.matmul_t(img, txt, false, true)?;
    let logits = t.mul_scalar(sim, scale)?;
    let targets: Vec<usize> = (0..b).collect();
    let i2t = t.cross_entropy(logits, &targets)?;
    let lt = t.permute(logits, &[1, 0])?;
    let t2i = t.cross_entropy(lt, &targets)?;
    let s = t.add(i2t, t2i)?;
    Ok(t.scale(s, 0.5)?)
}

/// Loss value for fixed embeddings and temperature `tau` (logits are
/// `cos / tau`).
pub fn infonce_loss(img: &Tensor<f64>, txt: &Tensor<f64>, tau: f64) -> Result<f64> {
    if img.ndim() != 2 || img.shape() != txt.shape() {
        return Err(CoreError::Eval(format!(
            "embedding shapes {:?} and {:?} differ or are not 2-D",
            img.shape(),
            txt.shape()
        )));
    }
    for (name, e) in [("image", img), ("text", txt)] {
        for i in 0..e.shape()[0] {
            let n: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if (n - 1.0).abs() > UNIT_TOL {
                return Err(CoreError::Eval(format!(
                    "{name} row {i} has norm {n}, expected 1"
                )));
            }
        }
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CoreError::Eval(format!(
            "temperature {tau} must be positive"
        )));
    }
    let mut t = Tape::<f64>::new();
    let a = t.constant(img.clone());
    let b = t.constant(txt.clone());
    let s = t.constant(Tensor::scalar(1.0 / tau));
    let l = infonce_graph(&mut t, a, b, s)?;
    Ok(t.value(l).item())
}
