//! Global pooling reductions over `B x C x H x W` maps, keepdims style.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn check_4d<E: Elem>(op: &'static str, x: &Tensor<E>) -> Result<()> {
    if x.rank() != 4 {
        return Err(TensorError::invalid(
            op,
            format!("expected B x C x H x W, got {:?}", x.shape()),
        ));
    }
    Ok(())
}

/// Global average pool -> `B x C x 1 x 1`.
pub fn gap<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_4d("gap", x)?;
    x.mean_axes(&[2, 3], true)
}

/// Global max pool -> `B x C x 1 x 1`.
pub fn gmp<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_4d("gmp", x)?;
    x.max_axes(&[2, 3], true)
}

/// Average over the width only -> `B x C x H x 1`.
pub fn gap_w<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_4d("gap_w", x)?;
    x.mean_axes(&[3], true)
}

/// Average over the height only -> `B x C x 1 x W`.
pub fn gap_h<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_4d("gap_h", x)?;
    x.mean_axes(&[2], true)
}

/// Mean across channels -> `B x 1 x H x W`.
pub fn channel_mean<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_4d("channel_mean", x)?;
    x.mean_axes(&[1], true)
}

/// Max across channels -> `B x 1 x H x W`.
pub fn channel_max<E: Elem>(x: &Tensor<E>) -> Result<Tensor<E>> {
    check_4d("channel_max", x)?;
    x.max_axes(&[1], true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn pools_on_constant_input_return_the_constant() {
        let x = Tensor::<f64>::full(vec![2, 3, 4, 5], 5.0);
        for f in [gap, gmp, gap_w, gap_h] {
            let y = f(&x).unwrap();
            for &v in y.data() {
                assert_eq!(v, 5.0);
            }
        }
    }

    #[test]
    fn gmp_picks_the_maximum() {
        let x = Tensor::<f64>::from_vec(vec![1, 1, 1, 3], vec![-1.0, 3.0, 2.0]).unwrap();
        assert_eq!(gmp(&x).unwrap().item(), 3.0);
    }

    #[test]
    fn gap_w_matches_row_mean_loop_oracle_exactly() {
        let mut rng = Rng::new(31);
        let x = Tensor::<f64>::rand_uniform(&mut rng, vec![2, 3, 4, 6], -1.0, 1.0);
        let y = gap_w(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 1]);
        for b in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    let mut acc = 0.0;
                    for w in 0..6 {
                        acc += x.at(&[b, c, h, w]);
                    }
                    assert_eq!(y.at(&[b, c, h, 0]), acc / 6.0);
                }
            }
        }
    }

    #[test]
    fn pool_shapes() {
        let x = Tensor::<f64>::zeros(vec![2, 3, 4, 5]);
        assert_eq!(gap(&x).unwrap().shape(), &[2, 3, 1, 1]);
        assert_eq!(gmp(&x).unwrap().shape(), &[2, 3, 1, 1]);
        assert_eq!(gap_w(&x).unwrap().shape(), &[2, 3, 4, 1]);
        assert_eq!(gap_h(&x).unwrap().shape(), &[2, 3, 1, 5]);
        assert_eq!(channel_mean(&x).unwrap().shape(), &[2, 1, 4, 5]);
        assert_eq!(channel_max(&x).unwrap().shape(), &[2, 1, 4, 5]);
    }
}
