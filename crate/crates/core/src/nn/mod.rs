//! A small convolutional classifier with hand-written backpropagation.
//!
//! Everything runs single-threaded in a fixed order, so training is
//! bit-reproducible for a given seed.

pub mod layers;
mod model;

pub use layers::{FeatureNorm, Param, Tensor};
pub use model::{
    forward_backward, prepare_input, Backbone, Classifier, Example, Flip, LossSettings, LossTerms, MixPlan,
    Prediction, Sgd, TinyCnn,
};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::incdp::{Centers, ChildWeights};
    use crate::stain::RgbImage;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_patch(seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 16 * 3).map(|_| rng.random_range(40..255u8)).collect();
        RgbImage::from_raw(16, 16, data).unwrap()
    }

    fn batch() -> Vec<Example> {
        (0..4)
            .map(|i| Example {
                input: prepare_input(&noise_patch(i), Flip::default()),
                parent: (i % 2) as u8,
                child: Some(if i % 2 == 0 { (i / 2) as usize } else { 2 + (i / 2) as usize }),
            })
            .collect()
    }

    fn total_loss(model: &Classifier, mix: Option<&MixPlan>, weights: &ChildWeights) -> f64 {
        let mut m = model.clone();
        m.zero_grad();
        let mut cp = Centers::zeros(2, m.feature_dim());
        cp.vectors.fill(0.1);
        let mut cc = Centers::zeros(4, m.feature_dim());
        cc.vectors.fill(0.05);
        let s = LossSettings {
            gamma: 2.0,
            lambda: 0.5,
            center_rate: 0.5,
            child_weights: Some(weights),
        };
        let t = forward_backward(&mut m, &batch(), &mut cp, Some(&mut cc), &s, mix).unwrap();
        t.focal_p + t.center_p + 0.5 * (t.focal_c.unwrap() + t.center_c.unwrap())
    }

    /// Analytic gradients of the full joint loss agree with central differences.
    /// Under mixing the stop-gradient makes the lower-block gradient differ from
    /// the true derivative unless mu = 1, so lower blocks are only compared there.
    #[test]
    fn joint_gradient_matches_finite_difference() {
        let weights = ChildWeights {
            weights: vec![0.8, 1.2, 1.5, 0.5],
        };
        let mut model = Classifier::new(&[4, 6, 8], 9);
        model.attach_child_head(4, 10);
        let unsorted = MixPlan {
            partner: vec![2, 3, 0, 1],
            mu: vec![0.3, 0.8, 0.5, 0.1],
            sorted: false,
        };
        let identity = MixPlan {
            partner: vec![2, 3, 0, 1],
            mu: vec![1.0; 4],
            sorted: false,
        };
        for (mix, first) in [(None, 0), (Some(&unsorted), 8), (Some(&identity), 0)] {
            let mut m = model.clone();
            m.zero_grad();
            let mut cp = Centers::zeros(2, m.feature_dim());
            cp.vectors.fill(0.1);
            let mut cc = Centers::zeros(4, m.feature_dim());
            cc.vectors.fill(0.05);
            let s = LossSettings {
                gamma: 2.0,
                lambda: 0.5,
                center_rate: 0.5,
                child_weights: Some(&weights),
            };
            forward_backward(&mut m, &batch(), &mut cp, Some(&mut cc), &s, mix).unwrap();
            // per block: conv weight, conv bias, norm scale, norm shift; then heads
            let checks = [(0usize, 40usize), (2, 1), (3, 1), (4, 100), (8, 3), (10, 2), (11, 4), (12, 5), (14, 7)];
            for &(pi, ei) in checks.iter().filter(|c| c.0 >= first) {
                let analytic = m.params_mut()[pi].grad[ei] as f64;
                let h = 2e-3f32;
                let mut plus = model.clone();
                plus.params_mut()[pi].data[ei] += h;
                let mut minus = model.clone();
                minus.params_mut()[pi].data[ei] -= h;
                let fd = (total_loss(&plus, mix, &weights) - total_loss(&minus, mix, &weights)) / (2.0 * h as f64);
                let tol = 2e-2 * fd.abs().max(analytic.abs()).max(1e-2);
                assert!((analytic - fd).abs() < tol, "param {pi}[{ei}] mix={}: {analytic} vs {fd}", mix.is_some());
            }
        }
    }

    #[test]
    fn sgd_applies_weight_decay() {
        let mut model = Classifier::new(&[2], 1);
        model.zero_grad();
        let before = model.parent_head.weight.data[0];
        Sgd::new(0.1, 0.0, 0.5).step(&mut model);
        let after = model.parent_head.weight.data[0];
        assert!((after - before * (1.0 - 0.05)).abs() < 1e-7);
    }

    #[test]
    fn flips_are_permutations() {
        let p = noise_patch(3);
        let mut a = prepare_input(&p, Flip::default()).data;
        let mut b = prepare_input(&p, Flip { mirror: true, rot: 3 }).data;
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }
}
