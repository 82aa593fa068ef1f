use dext_core::detector::{DetectorConfig, DetectorModel};
use dext_core::saliency::{
    explain, input_gradient, integrated_gradients, DecisionKind, DecisionTarget, ExplainableModel, Method, MethodParams,
};
use dext_core::scene::{generate, SceneConfig};
use dext_core::tensor::{Affine, GradientRule, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f32 = 0.05;

fn outputs(model: &DetectorModel, x: &Tensor) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let p = model.forward(x.clone()).unwrap();
    let pre = p.pre_activations.iter().flat_map(|v| p.tape.value(*v).data().to_vec()).collect();
    (pre, p.tape.value(p.logits).data().to_vec(), p.tape.value(p.boxes).data().to_vec())
}

#[test]
fn detector_gradients_match_central_differences() {
    let mut probes = 0;
    for seed in 0..3u64 {
        let model = DetectorModel::seeded(DetectorConfig::default(), seed).unwrap();
        let k = model.num_classes();
        let x = generate(&SceneConfig::default(), seed).image.to_tensor();
        let (pre, _, _) = outputs(&model, &x);
        let anchor = 20 + seed as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for kind in DecisionKind::all_for_class(1) {
            let target = DecisionTarget { anchor_index: anchor, kind };
            let g = input_gradient(&model, &x, &target, GradientRule::Standard).unwrap();
            let floor = 1e-3 * g.data().iter().fold(0.0f32, |a, v| a.max(v.abs())) as f64;
            for _ in 0..16 {
                let i = rng.random_range(0..x.len());
                let mut plus = x.clone();
                plus.data_mut()[i] += STEP;
                let mut minus = x.clone();
                minus.data_mut()[i] -= STEP;
                let (pp, lp, bp) = outputs(&model, &plus);
                let (pm, lm, bm) = outputs(&model, &minus);
                let stable = pre.iter().zip(&pp).zip(&pm).all(|((&b, &u), &d)| {
                    (b > 0.0) == (u > 0.0) && (b > 0.0) == (d > 0.0) && (u == d || b.abs() >= 1e-2)
                });
                let (fp, fm) = match kind.coordinate_index() {
                    None => (lp[anchor * k + 1], lm[anchor * k + 1]),
                    Some(c) => (bp[anchor * 4 + c], bm[anchor * 4 + c]),
                };
                let clipped = kind.coordinate_index().is_some() && [fp, fm].iter().any(|&v| v <= 0.0 || v >= 1.0);
                if !stable || clipped {
                    continue;
                }
                let numeric = (fp as f64 - fm as f64) / (2.0 * STEP as f64);
                let analytic = g.data()[i] as f64;
                let scale = numeric.abs().max(analytic.abs()).max(floor);
                if scale > 0.0 {
                    assert!((numeric - analytic).abs() / scale < 1e-3, "{kind:?} input {i}: {numeric} vs {analytic}");
                }
                probes += 1;
            }
        }
    }
    assert!(probes > 20, "only {probes} usable probes");
}

fn small_net(seed: u64) -> (Affine, Affine, Vec<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (rng.random_range(1..6), rng.random_range(1..8));
    let mut q = |len: usize| -> Vec<f32> { (0..len).map(|_| rng.random_range(-8i32..=8) as f32 / 8.0).collect() };
    let l1 = Affine::new(Tensor::new(vec![m, n], q(m * n)).unwrap(), q(m)).unwrap();
    let l2 = Affine::new(Tensor::new(vec![2, m], q(2 * m)).unwrap(), q(2)).unwrap();
    (l1, l2, q(n))
}

proptest! {
    #[test]
    fn guided_backward_masks_by_forward_sign_and_relevance(seed in 0u64..10_000, out in 0usize..2) {
        let (l1, l2, x) = small_net(seed);
        let (n, m) = (x.len(), l1.out_features());
        let mut tape = Tape::new();
        let input = tape.leaf(Tensor::from_vec(x.clone()));
        let h = tape.affine(input, &l1).unwrap();
        let r = tape.relu(h).unwrap();
        let y = tape.affine(r, &l2).unwrap();
        let got = tape.backward(y, out, GradientRule::Guided, input).unwrap();

        let pre = tape.value(h).data().to_vec();
        let w1 = l1.weight.data();
        let w2 = l2.weight.data();
        let expected: Vec<f32> = (0..n)
            .map(|j| {
                (0..m)
                    .map(|i| {
                        let rel = w2[out * m + i];
                        if pre[i] > 0.0 && rel > 0.0 { w1[i * n + j] * rel } else { 0.0 }
                    })
                    .sum()
            })
            .collect();
        prop_assert_eq!(got.data(), &expected[..]);
    }
}

#[test]
fn integrated_gradients_complete_at_128_steps() {
    let model = DetectorModel::seeded(DetectorConfig::default(), 1).unwrap();
    for seed in [3u64, 8] {
        let x = generate(&SceneConfig::default(), seed).image.to_tensor();
        let base = Tensor::zeros(x.shape().to_vec());
        let raw = model.raw_outputs_tensor(x.clone()).unwrap();
        let anchor =
            (0..raw.anchor_count()).max_by(|&a, &b| raw.probs_of(a)[1].total_cmp(&raw.probs_of(b)[1])).unwrap();
        let target = DecisionTarget { anchor_index: anchor, kind: DecisionKind::ClassLogit(1) };
        let gap = model.evaluate(&x, &target).unwrap() as f64 - model.evaluate(&base, &target).unwrap() as f64;
        let attr = integrated_gradients(&model, &x, &base, &target, 128).unwrap();
        let total: f64 = attr.data().iter().map(|&v| v as f64).sum();
        assert!((total - gap).abs() / gap.abs() < 0.01, "scene {seed}: {total} vs {gap}");
    }
}

#[test]
fn smoothing_without_noise_reproduces_base() {
    let model = DetectorModel::seeded(DetectorConfig::default(), 1).unwrap();
    let image = generate(&SceneConfig::default(), 3).image;
    let params = MethodParams { sg_samples: 1, sg_noise: 0.0, ig_steps: 8, ..MethodParams::default() };
    for kind in DecisionKind::all_for_class(2) {
        let target = DecisionTarget { anchor_index: 25, kind };
        for (smoothed, base) in [(Method::Sgbp, Method::Gbp), (Method::Sig, Method::Ig)] {
            let a = explain(smoothed, &model, &image, &target, &params).unwrap();
            let b = explain(base, &model, &image, &target, &params).unwrap();
            assert_eq!(a.grid, b.grid, "{smoothed:?} {kind:?}");
        }
    }
}
