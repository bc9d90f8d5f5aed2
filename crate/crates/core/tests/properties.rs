use std::collections::VecDeque;

use facefill::contrastive::FeatureQueue;
use facefill::metrics::{psnr, roc_from_scores, ssim, SsimConfig};
use facefill::ImageTensor;
use proptest::prelude::*;

fn image(c: usize, h: usize, w: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..1.0, c * h * w).prop_map(move |d| ImageTensor::new(c, h, w, d).unwrap())
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    prop::collection::vec((-3i32..3, any::<bool>()), 2..40)
        .prop_map(|v| v.into_iter().map(|(s, l)| (s as f64, l)).unzip())
        .prop_filter("both classes", |(_, l): &(Vec<f64>, Vec<bool>)| {
            l.contains(&true) && l.contains(&false)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn queue_agrees_with_a_deque(cap in 1usize..12, batches in prop::collection::vec(0usize..6, 0..20)) {
        let dim = 2;
        let mut q = FeatureQueue::new(cap, dim).unwrap();
        let mut model: VecDeque<[f32; 2]> = VecDeque::new();
        let mut next = 0f32;
        for n in batches {
            let rows: Vec<[f32; 2]> = (0..n).map(|_| { next += 0.1; [next.cos(), next.sin()] }).collect();
            let flat: Vec<f32> = rows.iter().flatten().copied().collect();
            if n > cap {
                prop_assert!(q.enqueue_rows(&flat).is_err());
                continue;
            }
            q.enqueue_rows(&flat).unwrap();
            for r in rows {
                if model.len() == cap {
                    model.pop_front();
                }
                model.push_back(r);
            }
            let got: Vec<Vec<f32>> = q.ordered().into_iter().map(<[f32]>::to_vec).collect();
            let want: Vec<Vec<f32>> = model.iter().map(|r| r.to_vec()).collect();
            prop_assert_eq!(got, want);
            prop_assert_eq!(q.filled(), model.len());
        }
    }

    #[test]
    fn auc_ignores_monotone_rescaling((scores, labels) in labelled_scores(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let base = roc_from_scores(&scores, &labels).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let r = roc_from_scores(&moved, &labels).unwrap();
        prop_assert_eq!(base.auc.to_bits(), r.auc.to_bits());
        prop_assert!((0.0..=1.0).contains(&base.auc));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        let f = roc_from_scores(&flipped, &labels).unwrap();
        prop_assert!((base.auc + f.auc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(a in image(3, 12, 12), b in image(3, 12, 12)) {
        let p = psnr(&a, &b, 1.0).unwrap();
        prop_assert_eq!(p.to_bits(), psnr(&b, &a, 1.0).unwrap().to_bits());
        let cfg = SsimConfig::default();
        let s = ssim(&a, &b, &cfg).unwrap();
        prop_assert!((s - ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        prop_assert!(s <= 1.0 + 1e-12);
    }
}
