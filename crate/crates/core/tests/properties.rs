//! Randomized invariants across the library.

use ndarray::{Array1, Array2};
use proptest::prelude::*;
use proptest::test_runner::RngSeed;

use onc_core::clm::{nll_term, predict_label, thresholds_from_params};
use onc_core::data::{self, stratified_indices, synth_generate, Encoder, Normalization, Schema, SynthConfig};
use onc_core::eos::{self, EosProblem, Phase};
use onc_core::metrics::{self, FeatureBatch};
use onc_core::nn::{self, MlpConfig, MlpParams, SplitName, ThresholdMode, ThresholdState, TrainConfig};
use onc_core::propcheck;
use onc_core::ufm::{self, UfmConfig, UfmState};
use onc_core::{LinkKind, ThresholdParams, Thresholds};

/// Fixed seed and no persisted regressions, so every run checks the same cases.
fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        rng_seed: RngSeed::Fixed(0x0dd5_eed5),
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn link() -> impl Strategy<Value = LinkKind> {
    prop_oneof![Just(LinkKind::Logit), Just(LinkKind::Probit), Just(LinkKind::Cloglog)]
}

fn fd4(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

/// Ordered cut points `b_0 < … < b_Q`, optionally with infinite outer edges.
fn ladder(q: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Thresholds> {
    q.prop_flat_map(|q| (-6.0..0.0f64, prop::collection::vec(0.4..4.0f64, q), any::<bool>()))
        .prop_map(|(b0, gaps, open)| {
            let mut b = vec![b0];
            for g in &gaps {
                b.push(b.last().unwrap() + g);
            }
            if open {
                b[0] = f64::NEG_INFINITY;
                *b.last_mut().unwrap() = f64::INFINITY;
            }
            Thresholds::new(b).unwrap()
        })
}

/// Random problems with `λ_w λ_h / C` log-uniform in `[1e-5, 3]`.
fn problem() -> impl Strategy<Value = EosProblem> {
    (link(), ladder(2..=6), -5.0..0.5f64, 0.3..3.0f64)
        .prop_flat_map(|(kind, thr, ratio_exp, lambda_h)| {
            let q = thr.num_classes();
            (
                Just((kind, thr, ratio_exp, lambda_h)),
                prop::collection::vec(0.2..1.0f64, q),
            )
        })
        .prop_map(|((kind, thr, ratio_exp, lambda_h), weights)| {
            let total: f64 = weights.iter().sum();
            let alpha = weights.iter().map(|w| w / total).collect();
            let p = EosProblem::new(kind, thr, alpha, 1.0, lambda_h).unwrap();
            let c = eos::phase_constant(&p).unwrap();
            p.with_lambda_w(c * 10f64.powf(ratio_exp) / lambda_h)
        })
}

fn orthogonal(p: usize, seed: u64) -> Array2<f64> {
    use rand::Rng;
    let mut r = onc_core::rng::seeded(seed);
    let m = nalgebra::DMatrix::<f64>::from_fn(p, p, |_, _| r.random_range(-1.0..1.0));
    let q = m.qr().q();
    Array2::from_shape_fn((p, p), |(i, j)| q[(i, j)])
}

mod link_props {
    use super::*;

    proptest! {
        #![proptest_config(config(256))]
        #[test]
        fn cdf_is_monotone(kind in link(), x in -40.0..40.0f64, dx in 1e-3..5.0f64) {
            let (lo, hi) = (kind.cdf(x), kind.cdf(x + dx));
            prop_assert!(lo <= hi);
            if x >= -20.0 && x + dx <= 3.0 {
                prop_assert!(lo < hi, "{kind}: g({x}) = g({})", x + dx);
            }
        }

        #[test]
        fn symmetric_links_reflect(x in -30.0..30.0f64) {
            for kind in [LinkKind::Logit, LinkKind::Probit] {
                prop_assert!((kind.cdf(x) + kind.cdf(-x) - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn derivatives_match_differences(kind in link(), x in -10.0..10.0f64) {
            let h = 1e-3;
            let d = kind.density(x);
            let d_fd = fd4(|t| kind.cdf(t), x, h);
            prop_assert!((d - d_fd).abs() <= 1e-6 * d.abs().max(1e-4), "{kind} g' at {x}: {d} vs {d_fd}");
            let s = kind.density_slope(x);
            let s_fd = fd4(|t| kind.density(t), x, h);
            prop_assert!((s - s_fd).abs() <= 1e-6 * s.abs().max(1e-4), "{kind} g'' at {x}: {s} vs {s_fd}");
        }
    }
}

mod clm_props {
    use super::*;

    proptest! {
        #![proptest_config(config(256))]
        #[test]
        fn loss_is_translation_covariant(
            kind in link(),
            a in -6.0..6.0f64,
            log_width in -3.0..2.0f64,
            t in 0.0..1.0f64,
            c in -10.0..10.0f64,
            open in 0u8..3,
        ) {
            let b = a + log_width.exp();
            let z = (a - 5.0) + t * (b - a + 10.0);
            let (a, b) = match open {
                1 => (f64::NEG_INFINITY, b),
                2 => (a, f64::INFINITY),
                _ => (a, b),
            };
            let base = nll_term(kind, z, a, b).unwrap();
            let shifted = nll_term(kind, z + c, a + c, b + c).unwrap();
            prop_assert!((shifted - base).abs() <= 1e-12 * base.abs().max(1.0), "{base} vs {shifted}");
        }

        #[test]
        fn prediction_is_monotone(thr in ladder(2..=8), z1 in -30.0..30.0f64, dz in 0.0..10.0f64) {
            prop_assert!(predict_label(z1, &thr) <= predict_label(z1 + dz, &thr));
        }
    }

    proptest! {
        #![proptest_config(config(10_000))]
        #[test]
        fn learnable_thresholds_increase(s in prop::collection::vec(-10.0..10.0f64, 1..10)) {
            let thr = thresholds_from_params(&ThresholdParams::new(s).unwrap());
            prop_assert!(thr.values().windows(2).all(|w| w[0] < w[1]), "{:?}", thr.values());
        }
    }
}

mod eos_props {
    use super::*;

    proptest! {
        #![proptest_config(config(96))]
        #[test]
        fn solutions_satisfy_the_equations(p in problem()) {
            let sol = eos::solve(&p).unwrap();
            let c = eos::phase_constant(&p).unwrap();
            let ratio = p.lambda_w * p.lambda_h / c;
            let trivial = sol.phase == Phase::Trivial;
            prop_assert_eq!(trivial, sol.w_star == 0.0 && sol.z_star.iter().all(|&z| z == 0.0));
            if ratio >= 1.01 {
                prop_assert!(trivial, "ratio {ratio}");
            }
            if ratio <= 0.99 {
                prop_assert!(!trivial, "ratio {ratio}");
            }
            if !trivial {
                prop_assert!(sol.z_star.windows(2).all(|w| w[0] < w[1]), "{:?}", sol.z_star);
                let (rz, rw) = eos::eos_residuals(&p, sol.w_star, &sol.z_star).unwrap();
                // each residual balances two terms; measure it against their size
                let mu = p.lambda_h / (sol.w_star * sol.w_star);
                let scale_z = sol.z_star.iter().map(|z| (mu * z).abs()).fold(1.0, f64::max);
                let scale_w = (p.lambda_w * sol.w_star).max(1.0);
                prop_assert!(rz <= 1e-9 * scale_z && rw <= 1e-9 * scale_w, "residuals {rz:e} {rw:e} at scales {scale_z:e} {scale_w:e}");
                let lhs: f64 = p.alpha.iter().zip(&sol.z_star).map(|(a, z)| a * z * z).sum();
                let rhs = p.lambda_w / p.lambda_h * sol.w_star.powi(4);
                prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs, "{lhs} vs {rhs}");
            }
        }

        #[test]
        fn solution_minimizes_the_reduced_objective(p in problem(), probes in prop::collection::vec(-3.0..3.0f64, 100)) {
            let sol = eos::solve(&p).unwrap();
            let scale = if sol.w_star > 0.0 { sol.w_star } else { 1.0 };
            for e in probes {
                let w = scale * 10f64.powf(e);
                let f = eos::reduced_objective(&p, w).unwrap();
                prop_assert!(sol.objective <= f + 1e-12 * f.abs(), "F({w}) = {f} < {}", sol.objective);
            }
        }
    }
}

mod metrics_props {
    use super::*;

    fn batch() -> impl Strategy<Value = (Array2<f64>, Vec<usize>, Array1<f64>)> {
        (2usize..=6, 3usize..=5).prop_flat_map(|(p, q)| {
            let n = 4 * q;
            (
                prop::collection::vec(-3.0..3.0f64, n * p),
                prop::collection::vec(-2.0..2.0f64, p),
                Just((p, q)),
            )
                .prop_map(move |(f, w, (p, q))| {
                    let labels: Vec<usize> = (0..n).map(|i| 1 + i % q).collect();
                    (Array2::from_shape_vec((n, p), f).unwrap(), labels, Array1::from(w))
                })
        })
    }

    fn make(f: Array2<f64>, labels: &[usize]) -> FeatureBatch {
        let q = *labels.iter().max().unwrap();
        FeatureBatch::new(f, labels.to_vec(), q).unwrap()
    }

    proptest! {
        #![proptest_config(config(256))]
        #[test]
        fn indicators_are_rotation_invariant((f, labels, w) in batch(), seed in any::<u64>()) {
            let q = *labels.iter().max().unwrap();
            let thr = Thresholds::fixed(q, 5.0).unwrap();
            let r = orthogonal(w.len(), seed);
            let base = metrics::report(&make(f.clone(), &labels), w.view(), &thr, LinkKind::Logit).unwrap();
            let rot = metrics::report(&make(f.dot(&r.t()), &labels), r.dot(&w).view(), &thr, LinkKind::Logit).unwrap();
            for (x, y) in [(base.onc1, rot.onc1), (base.onc2_1, rot.onc2_1), (base.onc2_2, rot.onc2_2), (base.onc3, rot.onc3)] {
                prop_assert!((x - y).abs() <= 1e-8, "{base:?} vs {rot:?}");
            }
        }

        #[test]
        fn classifier_alignment_ignores_sign(w in prop::collection::vec(-2.0..2.0f64, 1..8), u in prop::collection::vec(-2.0..2.0f64, 8)) {
            let w = Array1::from(w);
            let u = Array1::from(u[..w.len()].to_vec());
            prop_assume!(w.dot(&w) > 1e-6 && u.dot(&u) > 1e-6);
            let base = metrics::onc2_2(w.view(), u.view()).unwrap();
            prop_assert_eq!(base, metrics::onc2_2((-&w).view(), u.view()).unwrap());
            prop_assert_eq!(base, metrics::onc2_2(w.view(), (-&u).view()).unwrap());
        }

        #[test]
        fn within_class_ratio_is_scale_invariant((f, labels, _w) in batch(), c in 1e-3..1e3f64) {
            let a = metrics::onc1(&make(f.clone(), &labels));
            let b = metrics::onc1(&make(f * c, &labels));
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300), "{a} vs {b}");
        }

        #[test]
        fn off_axis_and_projected_fractions_sum_to_one((f, labels, _w) in batch()) {
            let batch = make(f, &labels);
            let devs = batch.mean_deviations();
            let u = metrics::principal_direction(&devs).unwrap();
            let along: f64 = devs.iter().map(|d| u.dot(d).powi(2)).sum();
            let total: f64 = devs.iter().map(|d| d.dot(d)).sum();
            let off = metrics::onc2_1(&batch).unwrap();
            prop_assert!((off + along / total - 1.0).abs() <= 1e-12, "{off} + {}", along / total);
        }
    }
}

mod ufm_props {
    use super::*;

    fn small(p: usize, n: usize, lambda_exp: f64, seed: u64) -> UfmConfig {
        let thr = Thresholds::new(vec![-10.0, -8.0, 3.0, 10.0]).unwrap();
        UfmConfig {
            steps: 300,
            log_every: 1,
            seed,
            ..UfmConfig::new(p, vec![n; 3], LinkKind::Logit, thr, 10f64.powf(lambda_exp), 1.0)
        }
    }

    proptest! {
        #![proptest_config(config(32))]
        #[test]
        fn line_search_never_ascends(p in 1usize..5, n in 2usize..7, e in -3.0..-0.3f64, seed in any::<u64>()) {
            let run = ufm::train(&small(p, n, e, seed)).unwrap();
            for pair in run.trajectory.windows(2) {
                let (a, b) = (pair[0].objective, pair[1].objective);
                prop_assert!(b <= a + 1e-12 * a.abs().max(1.0), "step {}: {a} -> {b}", pair[1].step);
            }
        }

        #[test]
        fn training_commutes_with_rotation(p in 2usize..5, n in 2usize..6, e in -3.0..-0.3f64, seed in any::<u64>()) {
            let cfg = small(p, n, e, seed);
            let init = UfmState::random(&cfg);
            let r = orthogonal(p, seed ^ 0x5eed);
            let rotated = UfmState { w: r.dot(&init.w), h: init.h.dot(&r.t()) };
            let a = ufm::train_from(&cfg, init).unwrap();
            let b = ufm::train_from(&cfg, rotated).unwrap();
            prop_assert_eq!(a.trajectory.len(), b.trajectory.len());
            for (x, y) in a.trajectory.iter().zip(&b.trajectory) {
                prop_assert!((x.objective - y.objective).abs() <= 1e-8, "step {}: {} vs {}", x.step, x.objective, y.objective);
            }
        }
    }

    #[test]
    fn converged_latents_are_ordered_and_match_eos() {
        for p in [1, 2, 8] {
            let cfg = UfmConfig {
                p,
                ..UfmConfig::default()
            };
            let run = ufm::train(&cfg).unwrap();
            assert!(run.converged, "p = {p}: {} steps, grad {:e}", run.steps, run.grad_norm);
            let sol = eos::solve(&cfg.eos_problem().unwrap()).unwrap();
            assert_eq!(sol.phase, Phase::Nontrivial);
            let z: Vec<f64> = ufm::feature_batch(&cfg, &run.state)
                .unwrap()
                .class_mean_latents(run.state.w.view())
                .unwrap()
                .into_iter()
                .map(Option::unwrap)
                .collect();
            assert!(z.windows(2).all(|w| w[0] < w[1]), "p = {p}: {z:?}");
            let cmp = ufm::compare_to_eos(&cfg, &run.state, &sol, 1e-4).unwrap();
            assert!(cmp.max_deviation <= 1e-4, "p = {p}: {cmp:?}");
        }
    }
}

mod nn_props {
    use super::*;

    fn tiny(seed: u64) -> MlpConfig {
        MlpConfig {
            input_dim: 3,
            width: 4,
            num_blocks: 1,
            feature_dim: 2,
            seed,
            ..MlpConfig::desk(3)
        }
    }

    fn toy(seed: u64) -> data::Dataset {
        synth_generate(&SynthConfig {
            counts: vec![6, 9, 5],
            input_dim: 3,
            noise_scale: 0.2,
            seed,
        })
        .unwrap()
        .0
    }

    proptest! {
        #![proptest_config(config(16))]
        #[test]
        fn training_is_deterministic(seed in any::<u64>(), learnable in any::<bool>()) {
            let cfg = TrainConfig {
                epochs: 4,
                batch_size: 7,
                half_range: 3.0,
                seed,
                threshold_mode: if learnable { ThresholdMode::Learnable } else { ThresholdMode::Fixed },
                ..TrainConfig::default()
            };
            let data = toy(seed);
            let a = nn::train(&tiny(seed), &cfg, &data, None).unwrap();
            let b = nn::train(&tiny(seed), &cfg, &data, None).unwrap();
            prop_assert_eq!(a.params.values(), b.params.values());
            prop_assert_eq!(a.history, b.history);
            prop_assert_eq!(a.thresholds, b.thresholds);
        }

        #[test]
        fn learning_rate_steps_down_only_at_decay_epochs(
            decays in prop::collection::btree_set(1usize..12, 0..4),
            factor in 0.05..1.0f64,
        ) {
            let cfg = TrainConfig {
                epochs: 12,
                batch_size: 8,
                half_range: 3.0,
                lr_decay_epochs: decays.iter().copied().collect(),
                lr_decay_factor: factor,
                ..TrainConfig::default()
            };
            let run = nn::train(&tiny(1), &cfg, &toy(1), None).unwrap();
            let lrs: Vec<(usize, f64)> = run
                .history
                .iter()
                .filter(|r| r.split == SplitName::Train)
                .map(|r| (r.epoch, r.lr))
                .collect();
            for &(e, lr) in &lrs {
                prop_assert_eq!(lr, cfg.lr_at(e));
            }
            for pair in lrs.windows(2) {
                let ((_, a), (e, b)) = (pair[0], pair[1]);
                prop_assert!(b <= a);
                prop_assert_eq!(b != a, factor < 1.0 && decays.contains(&(e - 1)), "epoch {}", e);
            }
        }

        #[test]
        fn learnable_thresholds_stay_ordered(
            epochs in 1usize..8,
            s in prop::collection::vec(-4.0..2.0f64, 2),
            seed in any::<u64>(),
        ) {
            let cfg = TrainConfig {
                epochs,
                batch_size: 5,
                base_lr: 0.3,
                threshold_mode: ThresholdMode::Learnable,
                initial_s: Some(s),
                seed,
                ..TrainConfig::default()
            };
            let run = nn::train(&tiny(seed), &cfg, &toy(seed), None).unwrap();
            let ThresholdState::Learnable(p) = &run.thresholds else {
                panic!("fixed thresholds in a learnable run");
            };
            let b = p.to_thresholds();
            prop_assert!(b.values().windows(2).all(|w| w[0] < w[1]), "{:?}", b.values());
        }
    }

    #[test]
    fn gradients_stay_correct_during_training() {
        let data = toy(3);
        let thr = Thresholds::fixed(3, 3.0).unwrap();
        let x = data.inputs.slice(ndarray::s![..8, ..]).to_owned();
        let y = data.labels[..8].to_vec();
        for epochs in [0, 5, 20, 60] {
            let cfg = TrainConfig {
                epochs,
                batch_size: 4,
                half_range: 3.0,
                ..TrainConfig::default()
            };
            let params = if epochs == 0 {
                MlpParams::init(&tiny(3)).unwrap()
            } else {
                nn::train(&tiny(3), &cfg, &data, None).unwrap().params
            };
            let check = nn::gradient_check(&params, x.view(), &y, &thr, LinkKind::Logit).unwrap();
            assert!(check.max_rel_err <= 1e-4, "after {epochs} epochs: {check:?}");
        }
    }
}

mod data_props {
    use super::*;

    proptest! {
        #![proptest_config(config(256))]
        #[test]
        fn stratified_split_is_proportional(
            counts in prop::collection::vec(0usize..40, 2..6),
            fraction in 0.05..0.95f64,
            seed in any::<u64>(),
        ) {
            let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(q, &n)| std::iter::repeat_n(q + 1, n)).collect();
            let (train, val, _) = stratified_indices(&labels, counts.len(), fraction, seed).unwrap();
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            for (q, &n) in counts.iter().enumerate() {
                let got = train.iter().filter(|&&i| labels[i] == q + 1).count();
                if n == 1 {
                    prop_assert_eq!(got, 1);
                } else {
                    prop_assert!((got as f64 - fraction * n as f64).abs() <= 1.0, "class {}: {got} of {n}", q + 1);
                }
            }
        }

        #[test]
        fn synthetic_histogram_is_exact(
            counts in prop::collection::vec(1usize..30, 2..7),
            input_dim in 1usize..8,
            noise in 0.0..1.0f64,
            seed in any::<u64>(),
        ) {
            let (d, dir) = synth_generate(&SynthConfig { counts: counts.clone(), input_dim, noise_scale: noise, seed }).unwrap();
            prop_assert_eq!(d.class_counts(), counts);
            prop_assert!((dir.dot(&dir) - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn encoding_is_idempotent(
            rows in prop::collection::vec((-50.0..50.0f64, 0u8..3, 1u8..4), 4..30),
            minmax in any::<bool>(),
        ) {
            let mut text = String::from("x,colour,y\n");
            for (x, c, y) in &rows {
                text.push_str(&format!("{x},{},{y}\n", ["red", "green", "blue"][*c as usize]));
            }
            let schema = Schema::parse("x: numeric\ncolour: categorical\ny: label\n").unwrap();
            let table = data::read_csv_str(&text, &schema, None).unwrap();
            let norm = if minmax { Normalization::Minmax } else { Normalization::Zscore };
            let enc = Encoder::fit(&table, norm).unwrap();
            let first = enc.apply(&table).unwrap();
            prop_assert_eq!(&first, &enc.apply(&table).unwrap());
            prop_assert_eq!(&first, &Encoder::fit(&table, norm).unwrap().apply(&table).unwrap());
        }
    }
}

mod propcheck_props {
    use super::*;

    proptest! {
        #![proptest_config(config(8))]
        #[test]
        fn reports_are_reproducible_and_round_trip(seed in any::<u64>(), kind in link()) {
            let runs = [
                propcheck::check_loss_convexity(kind, 40, seed).unwrap(),
                propcheck::check_minimizer_monotonicity(kind, 1.0, 40, seed).unwrap(),
                propcheck::check_strict_ordering(kind, 40, seed).unwrap(),
            ];
            let again = [
                propcheck::check_loss_convexity(kind, 40, seed).unwrap(),
                propcheck::check_minimizer_monotonicity(kind, 1.0, 40, seed).unwrap(),
                propcheck::check_strict_ordering(kind, 40, seed).unwrap(),
            ];
            prop_assert_eq!(&runs, &again);
            let json = serde_json::to_string(&runs).unwrap();
            let back: Vec<propcheck::PropertyReport> = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(runs.to_vec(), back);
        }
    }
}
