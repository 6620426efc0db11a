use proptest::prelude::*;

use praf_core::alignment::{build_mask, kept_count, rank_layers, select_layers, LayerScore};
use praf_core::attack::{pgd_step, CropWindow, UpdateRule};
use praf_core::io::{load_image, quantized, save_image};
use praf_core::judge::{aggregate, parse_score};
use praf_core::metrics::{psnr, ssim};
use praf_core::resolution::{nearest_index, nearest_resize, synthesize_stage_target, StageSchedule};
use praf_core::tensor::{cosine, Tape, Tensor};
use praf_core::{stage_index, Image, LayerRef};

fn image(size: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, size * size * 3).prop_map(move |d| Image::new(size, size, d).unwrap())
}

fn nonzero_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, n).prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
}

proptest! {
    #[test]
    fn cosine_is_scale_invariant_symmetric_and_bounded(u in nonzero_vec(12), v in nonzero_vec(12), a in 0.01f64..100.0) {
        let c = cosine(&u, &v).unwrap();
        let scaled: Vec<f64> = u.iter().map(|x| a * x).collect();
        prop_assert!((cosine(&scaled, &v).unwrap() - c).abs() < 1e-12);
        prop_assert!((cosine(&v, &u).unwrap() - c).abs() < 1e-15);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn tape_cosine_matches_slice_cosine(u in nonzero_vec(7), v in nonzero_vec(7)) {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::vector(u.clone()));
        let b = tape.leaf(Tensor::vector(v.clone()));
        prop_assert!((a.cosine(b).unwrap().item().unwrap() - cosine(&u, &v).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn mask_is_top_k_of_full_sort(s in prop::collection::vec(-1.0f64..1.0, 1..256), g in 1usize..=10) {
        let gamma = g as f64 / 10.0;
        let k = kept_count(gamma, s.len()).unwrap();
        prop_assume!(k > 0);
        let mask = build_mask(&s, gamma).unwrap();
        prop_assert_eq!(mask.kept(), k);
        prop_assert_eq!(mask.bits().iter().filter(|b| **b).count(), k);
        let mut order: Vec<usize> = (0..s.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
        let mut expected = order[..k].to_vec();
        expected.sort_unstable();
        prop_assert_eq!(mask.kept_indices(), expected);
        // Every kept similarity is at least every dropped one.
        let min_kept = mask.kept_indices().iter().map(|&i| s[i]).fold(f64::INFINITY, f64::min);
        prop_assert!(s.iter().zip(mask.bits()).filter(|(_, b)| !**b).all(|(v, _)| *v <= min_kept));
    }

    #[test]
    fn asr_is_monotone_and_bounded(scores in prop::collection::vec(0.0f64..=1.0, 1..50), inclusive: bool) {
        let thresholds = [0.5, 0.6, 0.7, 0.8, 0.9];
        let s = aggregate(&scores, &thresholds, inclusive).unwrap();
        for w in s.windows(2) {
            prop_assert!(w[1].asr <= w[0].asr);
            prop_assert_eq!(w[1].avg_sim, w[0].avg_sim);
        }
        for e in &s {
            prop_assert!((0.0..=1.0).contains(&e.asr));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&e.avg_sim));
        }
    }

    #[test]
    fn parsed_scores_are_clamped(x in -1e3f64..1e3) {
        let s = parse_score(&format!("Score: {x}")).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert_eq!(s, x.clamp(0.0, 1.0));
    }

    #[test]
    fn pgd_step_keeps_both_constraints(
        data in prop::collection::vec((0.0f64..=1.0, -1.0f64..1.0, -1.0f64..1.0), 1..64),
        eps_steps in 1u32..32,
        literal: bool,
    ) {
        let eps = eps_steps as f64 / 255.0;
        let eta = 1.0 / 255.0;
        let x: Vec<f64> = data.iter().map(|d| d.0).collect();
        // Start from an arbitrary feasible δ.
        let delta: Vec<f64> = data.iter().map(|d| (d.1 * eps).clamp(-d.0, 1.0 - d.0)).collect();
        let grad: Vec<f64> = data.iter().map(|d| d.2).collect();
        let rule = if literal { UpdateRule::LiteralAscent } else { UpdateRule::Descent };
        let next = pgd_step(&delta, &grad, eta, eps, &x, rule).unwrap();
        for ((d, c), old) in next.iter().zip(&x).zip(&delta) {
            prop_assert!(d.abs() <= eps);
            prop_assert!((0.0..=1.0).contains(&(c + d)));
            prop_assert!((d - old).abs() <= eta + 1e-15);
        }
    }

    #[test]
    fn stages_are_contiguous_and_cover_the_run(total in 1usize..500, stages in 1usize..6) {
        prop_assume!(total >= stages);
        let res: Vec<usize> = (1..=stages).map(|m| m * 8).collect();
        let s = StageSchedule::new(total, res, stages * 8).unwrap();
        let idx: Vec<usize> = (1..=total).map(|t| stage_index(t, &s).unwrap()).collect();
        prop_assert_eq!(idx[0], 1);
        prop_assert_eq!(*idx.last().unwrap(), stages);
        prop_assert!(idx.windows(2).all(|w| w[1] == w[0] || w[1] == w[0] + 1));
    }

    #[test]
    fn nearest_index_stays_in_range(i in 0usize..500, a in 1usize..300, b in 1usize..300) {
        prop_assume!(i < b);
        prop_assert!(nearest_index(i, a, b) < a);
    }

    #[test]
    fn stage_targets_only_reuse_source_values(img in image(12), r in 1usize..=12) {
        let t = synthesize_stage_target(&img, r, 12).unwrap();
        let mut values: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        values.sort_unstable();
        prop_assert!(t.data().iter().all(|v| values.binary_search(&v.to_bits()).is_ok()));
        if r == 12 {
            prop_assert_eq!(&t, &img);
        }
        prop_assert_eq!(nearest_resize(&img, 12).unwrap(), img);
    }

    #[test]
    fn crop_indices_stay_inside_the_window(size in 2usize..40, seed in 0u64..1000, lo in 0.1f64..1.0) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w = CropWindow::sample(&mut rng, size, (lo, 1.0));
        prop_assert!(w.top + w.side <= size && w.left + w.side <= size);
        for i in w.gather_indices(size) {
            let (y, x) = (i / 3 / size, i / 3 % size);
            prop_assert!(y >= w.top && y < w.top + w.side && x >= w.left && x < w.left + w.side);
        }
    }

    #[test]
    fn bounded_perturbations_respect_psnr_floor(img in image(12), noise in prop::collection::vec(-1.0f64..=1.0, 12 * 12 * 3)) {
        let eps = 16.0 / 255.0;
        let adv = Image::new(12, 12, img.data().iter().zip(&noise).map(|(c, n)| (c + n * eps).clamp(0.0, 1.0)).collect()).unwrap();
        prop_assert!(psnr(&adv, &img).unwrap() >= 20.0 * (255.0f64 / 16.0).log10() - 1e-9);
    }

    #[test]
    fn ssim_symmetric_and_at_most_one(a in image(11), b in image(11)) {
        let s = ssim(&a, &b).unwrap();
        prop_assert_eq!(s, ssim(&b, &a).unwrap());
        prop_assert!(s <= 1.0 + 1e-12 && s >= -1.0 - 1e-12);
    }

    #[test]
    fn ranking_is_a_sorted_permutation(values in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let pool: Vec<LayerScore> = values.iter().enumerate()
            .map(|(i, &score)| LayerScore { layer: LayerRef::new(i / 4, i % 4 + 1), score })
            .collect();
        let ranked = rank_layers(&pool);
        prop_assert_eq!(ranked.len(), pool.len());
        prop_assert!(ranked.windows(2).all(|w| w[0].score >= w[1].score));
        let top = select_layers(&pool, &[1]).unwrap();
        prop_assert_eq!(top.entries()[0], ranked[0].layer);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn png_round_trip_is_within_half_a_step(img in image(6)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        prop_assert!(img.max_abs_diff(&back) <= 1.0 / 510.0 + 1e-12);
        prop_assert_eq!(&back, &quantized(&img));
        let bytes = std::fs::read(&path).unwrap();
        save_image(&back, &path).unwrap();
        prop_assert_eq!(bytes, std::fs::read(&path).unwrap());
    }
}
