//! Joint focal + dice training objective over four-category pixel maps.

use crate::elem::Elem;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// Hyperparameters of the joint objective.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig {
    /// weight of the focal term in the joint loss
    pub joint_alpha: f64,
    /// weight of the dice term in the joint loss
    pub joint_beta: f64,
    /// weight given to foreground categories (background gets 1 - gamma)
    pub focal_gamma: f64,
    /// focusing exponent on (1 - p)
    pub focal_delta: f64,
    /// dice smoothing term
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            joint_alpha: 0.6,
            joint_beta: 0.4,
            focal_gamma: 0.25,
            focal_delta: 0.2,
            dice_eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.joint_alpha + self.joint_beta - 1.0).abs() > 1e-9 {
            return Err(TensorError::invalid(
                "loss_config",
                format!(
                    "joint weights must sum to 1, got {} + {}",
                    self.joint_alpha, self.joint_beta
                ),
            ));
        }
        if self.dice_eps <= 0.0 {
            return Err(TensorError::invalid("loss_config", "dice_eps must be positive"));
        }
        Ok(())
    }
}

/// Category ids per pixel, batch-major `B x H x W`, ids in 0..4.
#[derive(Clone, Debug)]
pub struct LabelMap {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(batch: usize, h: usize, w: usize, ids: Vec<u8>) -> Result<Self> {
        if ids.len() != batch * h * w {
            return Err(TensorError::invalid(
                "label_map",
                format!("{} ids for {batch}x{h}x{w}", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= NUM_CLASSES) {
            return Err(TensorError::invalid(
                "label_map",
                format!("label id {bad} out of range 0..{NUM_CLASSES}"),
            ));
        }
        Ok(LabelMap { batch, h, w, ids })
    }

    /// One-hot encoding, `B x 4 x H x W`.
    pub fn one_hot<E: Elem>(&self) -> Tensor<E> {
        let (b, h, w) = (self.batch, self.h, self.w);
        let mut data = vec![E::ZERO; b * NUM_CLASSES * h * w];
        for bi in 0..b {
            for p in 0..h * w {
                let id = self.ids[bi * h * w + p] as usize;
                data[(bi * NUM_CLASSES + id) * h * w + p] = E::ONE;
            }
        }
        Tensor::from_vec(vec![b, NUM_CLASSES, h, w], data).unwrap()
    }

    /// Per-pixel focal class weight: gamma for foreground categories,
    /// 1 - gamma for background.
    fn focal_weights<E: Elem>(&self, gamma: f64) -> Tensor<E> {
        let data: Vec<E> = self
            .ids
            .iter()
            .map(|&id| E::from_f64(if id == 0 { 1.0 - gamma } else { gamma }))
            .collect();
        Tensor::from_vec(vec![self.batch, self.h, self.w], data).unwrap()
    }
}

/// Hard category choice per pixel from a `B x 4 x H x W` probability or
/// logit map (first maximum wins ties).
pub fn argmax_categories<E: Elem>(scores: &Tensor<E>) -> Result<LabelMap> {
    if scores.rank() != 4 || scores.shape()[1] != NUM_CLASSES {
        return Err(TensorError::invalid(
            "argmax_categories",
            format!("expected B x {NUM_CLASSES} x H x W, got {:?}", scores.shape()),
        ));
    }
    let (b, h, w) = (scores.shape()[0], scores.shape()[2], scores.shape()[3]);
    let map = h * w;
    let mut ids = Vec::with_capacity(b * map);
    for bi in 0..b {
        for p in 0..map {
            let mut best = 0usize;
            let mut best_v = scores.data()[(bi * NUM_CLASSES) * map + p];
            for c in 1..NUM_CLASSES {
                let v = scores.data()[(bi * NUM_CLASSES + c) * map + p];
                if v > best_v {
                    best_v = v;
                    best = c;
                }
            }
            ids.push(best as u8);
        }
    }
    LabelMap::new(b, h, w, ids)
}

fn check_probs<E: Elem>(op: &'static str, probs: &Tensor<E>, gt: &LabelMap) -> Result<()> {
    let want = [gt.batch, NUM_CLASSES, gt.h, gt.w];
    if probs.shape() != want {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: probs.shape().to_vec(),
            rhs: want.to_vec(),
        });
    }
    for &p in probs.data() {
        let v = p.to_f64();
        if !(-1e-6..=1.0 + 1e-6).contains(&v) {
            return Err(TensorError::invalid(
                op,
                format!("probability {v} outside [0,1]"),
            ));
        }
    }
    Ok(())
}

/// Class-balanced focal cross-entropy:
/// `-(1/N) sum w_c (1 - p_true)^delta ln(p_true)`.
///
/// `p_true` is clamped to [1e-12, 1 - 1e-6] so a saturated prediction
/// neither produces infinities nor a NaN gradient. The upper margin must
/// survive f32 rounding (1 - 1e-9 would collapse to 1.0 and reopen the
/// `0^(delta-1)` singularity in the backward pass); a perfect prediction
/// therefore scores ~5e-8 rather than exactly zero.
pub fn focal_loss<E: Elem>(
    probs: &Tensor<E>,
    gt: &LabelMap,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    check_probs("focal_loss", probs, gt)?;
    cfg.validate()?;
    let one_hot: Tensor<E> = gt.one_hot();
    let p_true = probs
        .mul(&one_hot)?
        .sum_axes(&[1], false)? // B x H x W
        .clamp(E::from_f64(1e-12), E::from_f64(1.0 - 1e-6));
    let focus = p_true
        .neg()
        .add_scalar(E::ONE)
        .powf_scalar(E::from_f64(cfg.focal_delta));
    let weights: Tensor<E> = gt.focal_weights(cfg.focal_gamma);
    weights
        .mul(&focus)?
        .mul(&p_true.ln().neg())?
        .mean_all()
}

/// Squared-denominator dice per category:
/// `1 - (2 sum p g + eps) / (sum (p^2 + g^2) + eps)`, averaged over the
/// four categories. Sums run over every pixel of the batch.
pub fn dice_loss<E: Elem>(
    probs: &Tensor<E>,
    gt_onehot: &Tensor<E>,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    if probs.shape() != gt_onehot.shape() || probs.rank() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "dice_loss",
            lhs: probs.shape().to_vec(),
            rhs: gt_onehot.shape().to_vec(),
        });
    }
    cfg.validate()?;
    Ok(dice_components(probs, gt_onehot, cfg)?.mean_all()?)
}

/// The four per-category dice values (before averaging).
pub fn dice_components<E: Elem>(
    probs: &Tensor<E>,
    gt_onehot: &Tensor<E>,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    let eps = E::from_f64(cfg.dice_eps);
    let inter = probs.mul(gt_onehot)?.sum_axes(&[0, 2, 3], false)?; // 4
    let p2 = probs.mul(probs)?.sum_axes(&[0, 2, 3], false)?;
    let g2 = gt_onehot.mul(gt_onehot)?.sum_axes(&[0, 2, 3], false)?;
    let num = inter.scale(E::from_f64(2.0)).add_scalar(eps);
    let den = p2.add(&g2)?.add_scalar(eps);
    Ok(num.div(&den)?.neg().add_scalar(E::ONE))
}

/// `alpha * focal + beta * dice` with gradient flow into `probs`.
pub fn joint_loss<E: Elem>(
    probs: &Tensor<E>,
    gt: &LabelMap,
    cfg: &LossConfig,
) -> Result<Tensor<E>> {
    let focal = focal_loss(probs, gt, cfg)?;
    let dice = dice_loss(probs, &gt.one_hot(), cfg)?;
    focal
        .scale(E::from_f64(cfg.joint_alpha))
        .add(&dice.scale(E::from_f64(cfg.joint_beta)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::BlockCheck;
    use crate::nn::ModelParams;
    use crate::rng::Rng;

    fn random_probs(rng: &mut Rng, b: usize, h: usize, w: usize) -> Tensor<f64> {
        // softmax of random logits: strictly inside (0,1), rows sum to 1
        Tensor::rand_uniform(rng, vec![b, NUM_CLASSES, h, w], -2.0, 2.0)
            .softmax(1)
            .unwrap()
            .detach()
    }

    fn random_labels(rng: &mut Rng, b: usize, h: usize, w: usize) -> LabelMap {
        let ids: Vec<u8> = (0..b * h * w).map(|_| rng.below(4) as u8).collect();
        LabelMap::new(b, h, w, ids).unwrap()
    }

    #[test]
    fn focal_is_zero_for_perfect_prediction() {
        let gt = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let probs: Tensor<f64> = gt.one_hot();
        let loss = focal_loss(&probs, &gt, &LossConfig::default()).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() < 1e-7, "clamp leaves ~5e-8, got {}", loss.item());
    }

    #[test]
    fn focal_single_pixel_matches_scalar_formula_oracle() {
        // one foreground pixel with p_true = 0.5
        let gt = LabelMap::new(1, 1, 1, vec![1]).unwrap();
        let probs =
            Tensor::from_vec(vec![1, 4, 1, 1], vec![0.2, 0.5, 0.2, 0.1]).unwrap();
        let cfg = LossConfig::default();
        let loss = focal_loss(&probs, &gt, &cfg).unwrap();
        let want = 0.25 * 0.5f64.powf(0.2) * 2.0f64.ln();
        assert!((loss.item() - want).abs() < 1e-12, "{} vs {want}", loss.item());

        // background pixels carry weight 1 - gamma
        let gt0 = LabelMap::new(1, 1, 1, vec![0]).unwrap();
        let probs0 =
            Tensor::from_vec(vec![1, 4, 1, 1], vec![0.5, 0.2, 0.2, 0.1]).unwrap();
        let loss0 = focal_loss(&probs0, &gt0, &cfg).unwrap();
        let want0 = 0.75 * 0.5f64.powf(0.2) * 2.0f64.ln();
        assert!((loss0.item() - want0).abs() < 1e-12);
    }

    #[test]
    fn focal_decreases_as_p_true_rises() {
        let gt = LabelMap::new(1, 1, 1, vec![2]).unwrap();
        let cfg = LossConfig::default();
        let mut last = f64::INFINITY;
        for i in 1..=9 {
            let p = 0.1 * i as f64;
            let rest = (1.0 - p) / 3.0;
            let probs =
                Tensor::from_vec(vec![1, 4, 1, 1], vec![rest, rest, p, rest]).unwrap();
            let loss = focal_loss(&probs, &gt, &cfg).unwrap().item();
            assert!(loss < last, "p={p}: {loss} !< {last}");
            last = loss;
        }
    }

    #[test]
    fn focal_rejects_out_of_range_probabilities() {
        let gt = LabelMap::new(1, 1, 1, vec![0]).unwrap();
        let probs = Tensor::from_vec(vec![1, 4, 1, 1], vec![1.2, -0.2, 0.0, 0.0]).unwrap();
        assert!(focal_loss(&probs, &gt, &LossConfig::default()).is_err());
    }

    #[test]
    fn dice_is_exactly_zero_for_perfect_prediction() {
        let mut rng = Rng::new(5);
        let gt = random_labels(&mut rng, 2, 3, 3);
        let onehot: Tensor<f64> = gt.one_hot();
        let loss = dice_loss(&onehot, &onehot, &LossConfig::default()).unwrap();
        assert_eq!(loss.item(), 0.0, "(2k+eps)/(2k+eps) cancels exactly");
    }

    #[test]
    fn dice_of_disjoint_masks_approaches_one() {
        // gt puts category 1 on the first k pixels, the prediction puts
        // it on the other k: intersection empty, denominator 2k
        let k = 6;
        let gt = LabelMap::new(1, 1, 2 * k, {
            let mut ids = vec![1u8; k];
            ids.extend(vec![0u8; k]);
            ids
        })
        .unwrap();
        let mut pred_ids = vec![0u8; k];
        pred_ids.extend(vec![1u8; k]);
        let pred = LabelMap::new(1, 1, 2 * k, pred_ids).unwrap();
        let cfg = LossConfig::default();
        let comp = dice_components::<f64>(&pred.one_hot(), &gt.one_hot(), &cfg).unwrap();
        let want = 1.0 - cfg.dice_eps / (2.0 * k as f64 + cfg.dice_eps);
        assert!((comp.at(&[1]) - want).abs() < 1e-12);
        assert!(comp.at(&[1]) > 0.999);
    }

    #[test]
    fn dice_matches_scalar_loop_oracle() {
        let mut rng = Rng::new(7);
        let probs = random_probs(&mut rng, 2, 4, 5);
        let gt = random_labels(&mut rng, 2, 4, 5);
        let onehot: Tensor<f64> = gt.one_hot();
        let cfg = LossConfig::default();
        let got = dice_loss(&probs, &onehot, &cfg).unwrap().item();

        let mut acc = 0.0;
        for c in 0..4 {
            let (mut inter, mut den) = (0.0, 0.0);
            for b in 0..2 {
                for i in 0..4 {
                    for j in 0..5 {
                        let p = probs.at(&[b, c, i, j]);
                        let g = onehot.at(&[b, c, i, j]);
                        inter += p * g;
                        den += p * p + g * g;
                    }
                }
            }
            acc += 1.0 - (2.0 * inter + cfg.dice_eps) / (den + cfg.dice_eps);
        }
        assert!((got - acc / 4.0).abs() < 1e-10);
    }

    #[test]
    fn dice_stays_in_unit_interval() {
        let mut rng = Rng::new(9);
        for _ in 0..200 {
            let probs = random_probs(&mut rng, 1, 3, 3);
            let gt = random_labels(&mut rng, 1, 3, 3);
            let v = dice_loss(&probs, &gt.one_hot(), &LossConfig::default())
                .unwrap()
                .item();
            assert!((0.0..=1.0).contains(&v), "dice = {v}");
        }
    }

    #[test]
    fn dice_rejects_shape_mismatch() {
        let a = Tensor::<f64>::zeros(vec![1, 4, 2, 2]);
        let b = Tensor::<f64>::zeros(vec![1, 4, 2, 3]);
        assert!(dice_loss(&a, &b, &LossConfig::default()).is_err());
    }

    #[test]
    fn joint_is_the_stated_combination_and_vanishes_when_perfect() {
        let mut rng = Rng::new(11);
        let probs = random_probs(&mut rng, 1, 4, 4);
        let gt = random_labels(&mut rng, 1, 4, 4);
        let cfg = LossConfig::default();
        let joint = joint_loss(&probs, &gt, &cfg).unwrap().item();
        let focal = focal_loss(&probs, &gt, &cfg).unwrap().item();
        let dice = dice_loss(&probs, &gt.one_hot(), &cfg).unwrap().item();
        assert_eq!(joint, 0.6 * focal + 0.4 * dice);

        let perfect: Tensor<f64> = gt.one_hot();
        let zero = joint_loss(&perfect, &gt, &cfg).unwrap().item();
        assert!(zero < 1e-6, "perfect prediction: {zero}");
    }

    #[test]
    fn joint_gradcheck_through_probabilities() {
        let mut rng = Rng::new(13);
        let probs = random_probs(&mut rng, 1, 3, 3);
        let gt = random_labels(&mut rng, 1, 3, 3);
        let cfg = LossConfig::default();
        let store = ModelParams::<f64>::new(0);
        let r = BlockCheck::new("joint_loss").run(&store, &probs, |_, t| {
            joint_loss(t, &gt, &cfg)
        });
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn label_map_rejects_bad_ids_and_sizes() {
        assert!(LabelMap::new(1, 2, 2, vec![0, 1, 2, 4]).is_err());
        assert!(LabelMap::new(1, 2, 2, vec![0, 1]).is_err());
    }

    #[test]
    fn argmax_picks_first_maximum() {
        let scores =
            Tensor::from_vec(vec![1, 4, 1, 1], vec![0.4, 0.4, 0.1, 0.1]).unwrap();
        let labels = argmax_categories(&scores).unwrap();
        assert_eq!(labels.ids, vec![0]);
    }
}
