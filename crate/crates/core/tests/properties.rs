use std::collections::{BTreeMap, BTreeSet};

use mocorr_core::autodiff::{lr_schedule, Graph, Tensor};
use mocorr_core::metrics::{psnr_from_mse, ssim, SsimParams};
use mocorr_core::model::{cbam_forward, ParamVars};
use mocorr_core::motion::{corrupt_slice, generate_trajectory, MotionState, MotionTrajectory, Ordering, Severity, SimConfig};
use mocorr_core::training::split_subjects;
use mocorr_core::volume::{decode_volume, encode_volume, normalize_volume};
use mocorr_core::{Slice, Volume};
use proptest::prelude::*;

fn image(n: usize) -> impl Strategy<Value = Slice> {
    prop::collection::vec(0.0f32..1.0, n * n).prop_map(move |d| Slice::new(n, n, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..40, seed in any::<u64>(), frac in 0.0f64..0.9) {
        let ids: Vec<String> = (0..n).map(|i| format!("id{i:02}")).collect();
        let s = split_subjects(&ids, seed, frac, 0.05).unwrap();
        let train: BTreeSet<_> = s.train_subjects.iter().collect();
        let test: BTreeSet<_> = s.test_subjects.iter().collect();
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert_eq!(test.len(), ((frac * n as f64).floor() as usize).max(1));
        prop_assert_eq!(s, split_subjects(&ids, seed, frac, 0.05).unwrap());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded((a, b) in (image(16), image(16))) {
        let p = SsimParams::default();
        let (ab, map) = ssim(&a, &b, &p).unwrap();
        let (ba, _) = ssim(&b, &a, &p).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!(map.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        prop_assert_eq!(ssim(&a, &a, &p).unwrap().0, 1.0);
    }

    #[test]
    fn psnr_falls_as_error_grows(mse in 1e-8f64..1e3, l in 0.5f64..300.0) {
        let v = psnr_from_mse(mse, l);
        prop_assert!((v - 10.0 * (l * l / mse).log10()).abs() < 1e-9);
        prop_assert!(psnr_from_mse(2.0 * mse, l) < v);
    }

    #[test]
    fn integer_translation_is_a_circular_shift(img in image(16), dx in 0usize..16, dy in 0usize..16) {
        let state = MotionState { rot_deg: [0.0; 3], trans_mm: [dx as f64, dy as f64, 0.0] };
        let traj = MotionTrajectory::constant(Ordering::Lines2d, 16, state);
        let out = corrupt_slice(&img, &traj, (1.0, 1.0), &SimConfig::default()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let moved = out.get((x + dx) % 16, (y + dy) % 16);
                prop_assert!((moved - img.get(x, y)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn trajectories_respect_preset_limits(seed in any::<u64>(), n in 16usize..256, k in 0usize..3) {
        let sev = Severity::ALL[k];
        let preset = sev.preset();
        let t = generate_trajectory(seed, n, &preset, Ordering::Lines2d).unwrap();
        prop_assert_eq!(t.len(), n);
        for s in &t.states {
            prop_assert!(s.rot_deg.iter().all(|r| r.abs() <= preset.rot_limit_deg));
            prop_assert!(s.trans_mm.iter().all(|r| r.abs() <= preset.trans_limit_mm));
        }
        if sev != Severity::Severe {
            let half = ((0.02 * n as f64).ceil() as usize).max(1);
            let c = n / 2;
            prop_assert!(t.states[c - half..(c + half).min(n)].iter().all(MotionState::is_zero));
        }
        prop_assert_eq!(t, generate_trajectory(seed, n, &preset, Ordering::Lines2d).unwrap());
    }

    #[test]
    fn learning_rate_decays_to_a_tenth(lr0 in 1e-5f64..1e-1, total in 2usize..100) {
        prop_assert!((lr_schedule(0.0, lr0, total) - lr0).abs() <= 1e-15 * lr0);
        prop_assert!((lr_schedule((total - 1) as f64, lr0, total) - lr0 / 10.0).abs() <= 1e-12 * lr0);
        for e in 1..total {
            prop_assert!(lr_schedule(e as f64, lr0, total) < lr_schedule((e - 1) as f64, lr0, total));
        }
    }

    #[test]
    fn volume_files_round_trip(
        dims in (1usize..6, 1usize..6, 1usize..6),
        spacing in prop::array::uniform3(0.1f32..4.0),
        seed in any::<u32>(),
    ) {
        let n = dims.0 * dims.1 * dims.2;
        let data: Vec<f32> = (0..n).map(|i| ((i as u32).wrapping_mul(2654435761) ^ seed) as f32 * 1e-9).collect();
        let v = Volume::new([dims.0, dims.1, dims.2], spacing, data).unwrap();
        prop_assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
    }

    #[test]
    fn normalization_lands_in_unit_interval(data in prop::collection::vec(-50.0f32..500.0, 64)) {
        let v = Volume::new([4, 4, 4], [1.0; 3], data).unwrap();
        let out = normalize_volume(&v, 0.5, 99.5).unwrap();
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn cbam_gates_only_attenuate(c in 1usize..5, hw in 1usize..6, seed in any::<u64>()) {
        let r = 1;
        let mut rng = mocorr_core::seed::rng(seed);
        let mut g = Graph::<f64>::new();
        let mut params = ParamVars::new();
        let shapes: BTreeMap<&str, Vec<usize>> = [
            ("a.fc1.w", vec![c / r, c]),
            ("a.fc1.b", vec![c / r]),
            ("a.fc2.w", vec![c, c / r]),
            ("a.fc2.b", vec![c]),
            ("a.spatial.w", vec![1, 2, 7, 7]),
            ("a.spatial.b", vec![1]),
        ]
        .into_iter()
        .collect();
        for (name, shape) in shapes {
            let t = mocorr_core::autodiff::gradcheck::uniform(&mut rng, &shape, -1.0, 1.0);
            params.insert(name.to_string(), g.constant(t));
        }
        let xt = mocorr_core::autodiff::gradcheck::uniform(&mut rng, &[2, c, hw, hw], -3.0, 3.0);
        let x = g.constant(xt.clone());
        let y = cbam_forward(&mut g, &params, "a", x).unwrap();
        let yt: &Tensor<f64> = g.value(y);
        prop_assert_eq!(&yt.shape, &xt.shape);
        for (a, b) in yt.data.iter().zip(&xt.data) {
            prop_assert!(a.abs() <= b.abs() && a * b >= 0.0);
        }
    }
}
