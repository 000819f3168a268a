use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sunet::analysis::{fit_linear, fit_logistic, mine_prefixes, table2_report, LogEntry, SentenceLog, DEFAULT_L2};
use sunet::backbone::BackboneConfig;
use sunet::channel::{gumbel_softmax, ChannelConfig};
use sunet::grad::{Tape, Tensor};
use sunet::model::{ModelConfig, SunetModel};
use sunet::params::{ForwardPass, Mode};
use sunet::postprocess::largest_component;
use sunet::synthdata::{region_stats, Laterality, RegionStats};
use sunet::trainer::dsc;

fn mask_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop::bool::weighted(0.3).prop_map(u8::from), h * w)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_lie_on_simplex(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        scale in 0.1f64..50.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new([rows, cols], data).unwrap()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.data(y).chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn gumbel_softmax_is_simplex_and_argmax_ignores_tau(
        p in prop::collection::vec(0.0f64..1.0, 2..8),
        g_seed in any::<u64>(),
        tau_a in 0.05f64..5.0,
        tau_b in 0.05f64..5.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(g_seed);
        let g: Vec<f64> = (0..p.len()).map(|_| rng.random_range(-2.0..4.0)).collect();
        let a = gumbel_softmax(&p, tau_a, &g).unwrap();
        let b = gumbel_softmax(&p, tau_b, &g).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(a.iter().all(|&v| v >= 0.0));
        let z: Vec<f64> = p.iter().zip(&g).map(|(pi, gi)| pi.max(1e-12).ln() + gi).collect();
        let mut sorted = z.clone();
        sorted.sort_by(|x, y| y.total_cmp(x));
        // Skip near-ties, where rounding decides the argmax.
        prop_assume!(sorted[0] - sorted[1] > 1e-9);
        prop_assert_eq!(argmax(&a), argmax(&b));
        prop_assert_eq!(argmax(&a), argmax(&z));
    }

    #[test]
    fn dsc_is_symmetric_and_bounded(a in mask_strategy(5, 5), b in mask_strategy(5, 5)) {
        let ab = dsc(&a, &b).unwrap();
        prop_assert_eq!(ab, dsc(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dsc(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn gradients_accumulate_linearly(
        seed in any::<u64>(),
        alpha in -3.0f64..3.0,
        beta in -3.0f64..3.0,
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xd: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let cd: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grads = |wa: f64, wb: f64| {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new([2, 3], xd.clone()).unwrap().with_requires_grad(true)).unwrap();
            let c = tape.constant(Tensor::new([2, 3], cd.clone()).unwrap()).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let f = tape.mul(s, c).unwrap();
            let f = tape.sum(f).unwrap();
            let t = tape.tanh(x).unwrap();
            let g = tape.mul(t, t).unwrap();
            let g = tape.sum(g).unwrap();
            let f = tape.mul_scalar(f, wa).unwrap();
            let g = tape.mul_scalar(g, wb).unwrap();
            let l = tape.add(f, g).unwrap();
            tape.backward(l).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let both = grads(alpha, beta);
        let fa = grads(1.0, 0.0);
        let gb = grads(0.0, 1.0);
        for i in 0..6 {
            let lin = alpha * fa[i] + beta * gb[i];
            prop_assert!((both[i] - lin).abs() <= 1e-12 * (1.0 + lin.abs()));
        }
    }

    #[test]
    fn mirroring_swaps_laterality(mask in mask_strategy(6, 8)) {
        let (h, w) = (6, 8);
        let mirrored: Vec<u8> = (0..h * w).map(|k| mask[(k / w) * w + (w - 1 - k % w)]).collect();
        let a = region_stats(&mask, h, w);
        let b = region_stats(&mirrored, h, w);
        prop_assert_eq!(a.area, b.area);
        prop_assert!((a.eccentricity - b.eccentricity).abs() < 1e-9);
        prop_assert_eq!(a.location, b.location);
        let n = mask.iter().filter(|&&m| m != 0).count();
        let col_sum: usize = (0..h * w).filter(|&k| mask[k] != 0).map(|k| k % w).sum();
        // Centroid exactly on the midline stays on the same side.
        if n > 0 && 2 * col_sum + n != w * n {
            let swapped = match a.laterality {
                Laterality::Left => Laterality::Right,
                Laterality::Right => Laterality::Left,
                Laterality::None => Laterality::None,
            };
            prop_assert_eq!(b.laterality, swapped);
        }
    }

    #[test]
    fn largest_component_is_subset_and_idempotent(mask in mask_strategy(6, 6)) {
        let once = largest_component(&mask, 6, 6);
        prop_assert!(once.iter().zip(&mask).all(|(o, m)| *o <= *m));
        prop_assert_eq!(largest_component(&once, 6, 6), once);
    }

    #[test]
    fn linear_r2_equals_explained_fraction(
        rows in 6usize..30,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cols = 2;
        let x: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..rows)
            .map(|r| 0.5 + 2.0 * x[r * cols] - x[r * cols + 1] + rng.random_range(-1.0..1.0))
            .collect();
        let fit = fit_linear(&x, cols, &y).unwrap();
        let mean = y.iter().sum::<f64>() / rows as f64;
        let sse: f64 = y.iter().zip(&fit.fitted).map(|(a, b)| (a - b).powi(2)).sum();
        let sst: f64 = y.iter().map(|a| (a - mean).powi(2)).sum();
        prop_assert!((fit.r2 - (1.0 - sse / sst)).abs() <= 1e-10, "{} vs {}", fit.r2, 1.0 - sse / sst);
    }

    #[test]
    fn logistic_objective_never_increases(
        rows in 8usize..40,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut y: Vec<bool> = (0..rows).map(|r| x[2 * r] + rng.random_range(-1.0..1.0) > 0.0).collect();
        y[0] = true;
        y[1] = false;
        let fit = fit_logistic(&x, 2, &y, DEFAULT_L2).unwrap();
        for w in fit.objective_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        prop_assert!(fit.pseudo_r2 >= 0.0 && fit.pseudo_r2 <= 1.0);
    }

    #[test]
    fn table2_ignores_record_order(
        ids in prop::collection::vec(prop::collection::vec(1u32..4, 2), 24),
        present in prop::collection::vec(any::<bool>(), 24),
        shift in 1usize..23,
    ) {
        let entries: Vec<LogEntry> = ids
            .iter()
            .zip(&present)
            .enumerate()
            .map(|(i, (ids, &p))| LogEntry {
                sample_id: format!("s{i:02}"),
                slice_index: 0,
                ids: ids.clone(),
                stats: if p {
                    RegionStats {
                        present: true,
                        area: 10 + (i * 7) % 13,
                        eccentricity: (i % 5) as f64 / 5.0,
                        laterality: if i % 2 == 0 { Laterality::Left } else { Laterality::Right },
                        location: sunet::synthdata::Location::Upper,
                        extra: Default::default(),
                    }
                } else {
                    RegionStats::absent()
                },
            })
            .collect();
        let mut rotated = entries.clone();
        rotated.rotate_left(shift);
        let a = table2_report(&SentenceLog::new(entries).unwrap(), 3).unwrap();
        let b = table2_report(&SentenceLog::new(rotated).unwrap(), 3).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn patterns_respect_coverage_and_purity(
        ids in prop::collection::vec(prop::collection::vec(1u32..4, 3), 1..30),
        min_coverage in 0.05f64..1.0,
    ) {
        let labels: Vec<String> = ids.iter().map(|s| if s[2] == 1 { "a" } else { "b" }.to_owned()).collect();
        let entries: Vec<LogEntry> = ids
            .iter()
            .enumerate()
            .map(|(i, s)| LogEntry {
                sample_id: format!("s{i:02}"),
                slice_index: 0,
                ids: s.clone(),
                stats: RegionStats::absent(),
            })
            .collect();
        let log = SentenceLog::new(entries).unwrap();
        let summary = mine_prefixes(&log, &labels, 3, min_coverage).unwrap();
        for (class, pats) in &summary.classes {
            let size = labels.iter().filter(|l| *l == class).count();
            for p in pats {
                let matching: Vec<&String> = log
                    .entries()
                    .iter()
                    .zip(&labels)
                    .filter(|(e, _)| e.ids.starts_with(&p.prefix))
                    .map(|(_, l)| l)
                    .collect();
                let support = matching.iter().filter(|l| **l == class).count();
                prop_assert_eq!(support, p.support);
                prop_assert!(p.coverage >= min_coverage && p.coverage <= 1.0);
                prop_assert!((p.coverage - support as f64 / size as f64).abs() < 1e-12);
                prop_assert!(p.purity > 0.9);
            }
        }
    }
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            base_channels: 2,
            depth: 1,
            feature_channels: 2,
            input_size: [8, 8],
            ..BackboneConfig::default()
        },
        channel: Some(ChannelConfig {
            sentence_length: 3,
            vocab_size: 5,
            hidden_size: 4,
            cell_size: 4,
            num_lstm_layers: 1,
            embedding_dim: 3,
            receiver_dim: 2,
            ..ChannelConfig::default()
        }),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Inference on a batch equals inference on each image alone.
    #[test]
    fn inference_is_batch_equivariant(seed in any::<u64>(), n in 2usize..5) {
        use rand::Rng;
        let model = SunetModel::new(tiny_config(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a);
        let images: Vec<Vec<f64>> = (0..n).map(|_| (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let run = |imgs: &[Vec<f64>]| {
            let mut pass = ForwardPass::new(&model.params, Mode::Infer);
            let data = imgs.concat();
            let x = pass.tape.constant(Tensor::new([imgs.len(), 1, 8, 8], data).unwrap()).unwrap();
            let out = model.forward::<ChaCha8Rng>(&mut pass, x, 1.0, None).unwrap();
            let probs = pass.tape.data(out.mask_prob).to_vec();
            let ids: Vec<Vec<u32>> = out.sender.unwrap().sentences.into_iter().map(|s| s.ids).collect();
            (probs, ids)
        };
        let (probs, ids) = run(&images);
        for (i, img) in images.iter().enumerate() {
            let (p1, id1) = run(std::slice::from_ref(img));
            prop_assert_eq!(&id1[0], &ids[i]);
            for (a, b) in p1.iter().zip(&probs[i * 64..(i + 1) * 64]) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
