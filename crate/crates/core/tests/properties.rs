use proptest::prelude::*;
use proptest::test_runner::{Config, RngSeed};

use s3d_core::datagen::{build_dataset, read_dataset, write_dataset, DomainSpec, SampleSet};
use s3d_core::graph::{finite_diff_check, Graph, Var};
use s3d_core::losses::{lambda_rampup, pair_kl};
use s3d_core::model::{ArchConfig, Model, Prediction};
use s3d_core::rng;
use s3d_core::selection::{pseudo_label, sample_pair_batch, select_reliable, top_two_margin, Student, StudentSet};
use s3d_core::style::{ag_blend, feature_stats, ChannelStats};
use s3d_core::tensor::{Result as TResult, Tensor};

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;

fn seeded(cases: u32) -> Config {
    Config {
        cases,
        rng_seed: RngSeed::Fixed(0x5eed),
        failure_persistence: None,
        ..Config::default()
    }
}

fn tensor(shape: &[usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Values bounded away from zero, so kinks and poles stay outside the FD stencil.
fn off_zero(shape: &[usize]) -> impl Strategy<Value = Tensor> {
    let shape = shape.to_vec();
    let n: usize = shape.iter().product();
    prop::collection::vec((0.05f64..2.0, any::<bool>()), n).prop_map(move |d| {
        let data = d.into_iter().map(|(v, neg)| if neg { -v } else { v }).collect();
        Tensor::new(shape.clone(), data).unwrap()
    })
}

/// Reduces `v` to a scalar with fixed, non-uniform weights so every output
/// entry gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, v: Var) -> TResult<Var> {
    let shape = g.value(v).shape().to_vec();
    let n = g.value(v).len();
    let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * ((i * 7) % 11) as f64).collect())?;
    let w = g.constant(w)?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

fn check(point: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> TResult<Var>) -> Result<(), TestCaseError> {
    let err = finite_diff_check(f, point, FD_STEP).unwrap();
    prop_assert!(err < FD_TOL, "relative error {err}");
    Ok(())
}

proptest! {
    #![proptest_config(seeded(100))]

    #[test]
    fn fd_matmul_transpose(a in tensor(&[3, 4], -2.0, 2.0), b in tensor(&[4, 2], -2.0, 2.0)) {
        check(&[a, b], |g, v| { let m = g.matmul(v[0], v[1])?; let t = g.transpose(m)?; weighted_sum(g, t) })?;
    }

    #[test]
    fn fd_conv_pool(x in tensor(&[2, 2, 4, 4], -1.0, 1.0), k in tensor(&[3, 2, 3, 3], -1.0, 1.0), b in tensor(&[3], -1.0, 1.0)) {
        check(&[x, k, b], |g, v| { let c = g.conv2d(v[0], v[1], Some(v[2]), 1)?; let p = g.avg_pool2(c)?; weighted_sum(g, p) })?;
    }

    #[test]
    fn fd_relu(x in off_zero(&[2, 5])) {
        check(&[x], |g, v| { let r = g.relu(v[0])?; weighted_sum(g, r) })?;
    }

    #[test]
    fn fd_elementwise(a in tensor(&[2, 3], -2.0, 2.0), b in off_zero(&[2, 3])) {
        check(&[a.clone(), b.clone()], |g, v| { let s = g.add(v[0], v[1])?; weighted_sum(g, s) })?;
        check(&[a.clone(), b.clone()], |g, v| { let s = g.sub(v[0], v[1])?; weighted_sum(g, s) })?;
        check(&[a.clone(), b.clone()], |g, v| { let s = g.mul(v[0], v[1])?; weighted_sum(g, s) })?;
        check(&[a, b], |g, v| { let s = g.div(v[0], v[1])?; weighted_sum(g, s) })?;
    }

    #[test]
    fn fd_bias_scale_shift(x in tensor(&[3, 4], -2.0, 2.0), b in tensor(&[4], -2.0, 2.0)) {
        check(&[x, b], |g, v| {
            let y = g.add_bias(v[0], v[1])?;
            let y = g.scale(y, -1.7)?;
            let y = g.add_scalar(y, 0.4)?;
            weighted_sum(g, y)
        })?;
    }

    #[test]
    fn fd_channel_moments(x in tensor(&[2, 3, 3, 3], -2.0, 2.0)) {
        check(&[x.clone()], |g, v| { let m = g.channel_mean(v[0])?; weighted_sum(g, m) })?;
        check(&[x], |g, v| { let s = g.channel_std(v[0])?; weighted_sum(g, s) })?;
    }

    #[test]
    fn fd_l2_normalize(x in off_zero(&[3, 4])) {
        for axis in 0..2 {
            check(&[x.clone()], |g, v| { let n = g.l2_normalize(v[0], axis)?; weighted_sum(g, n) })?;
        }
    }

    #[test]
    fn fd_softmax_log(x in tensor(&[3, 5], -3.0, 3.0), p in tensor(&[2, 3], 0.1, 2.0)) {
        check(&[x], |g, v| { let s = g.softmax(v[0])?; weighted_sum(g, s) })?;
        check(&[p], |g, v| { let l = g.log(v[0])?; weighted_sum(g, l) })?;
    }

    #[test]
    fn fd_reductions(x in tensor(&[3, 4], -2.0, 2.0), idx in prop::collection::vec(0usize..4, 3)) {
        check(&[x.clone()], |g, v| g.sum(v[0]))?;
        check(&[x.clone()], |g, v| g.mean(v[0]))?;
        check(&[x.clone()], |g, v| { let s = g.sum_last_axis(v[0])?; weighted_sum(g, s) })?;
        check(&[x.clone()], |g, v| { let s = g.gather(v[0], &idx)?; weighted_sum(g, s) })?;
        check(&[x], |g, v| { let r = g.reshape(v[0], &[2, 6])?; weighted_sum(g, r) })?;
    }

    #[test]
    fn fd_detach_blocks_one_path(x in tensor(&[4], -2.0, 2.0)) {
        // f = sum(w * x * stop(x)); the engine must differentiate only the live factor,
        // so compare against the same expression with the stopped factor as data
        let mut g = Graph::new();
        let v = g.leaf(x.clone(), true).unwrap();
        let d = g.detach(v).unwrap();
        let p = g.mul(v, d).unwrap();
        let f = weighted_sum(&mut g, p).unwrap();
        let got = g.backward(f).unwrap().get(v).unwrap().clone();
        let frozen = x.clone();
        let err = finite_diff_check(move |g, v| { let c = g.constant(frozen.clone())?; let p = g.mul(v[0], c)?; weighted_sum(g, p) }, &[x.clone()], FD_STEP).unwrap();
        prop_assert!(err < FD_TOL);
        let mut h = Graph::new();
        let w = h.leaf(x.clone(), true).unwrap();
        let c = h.constant(x).unwrap();
        let q = h.mul(w, c).unwrap();
        let f2 = weighted_sum(&mut h, q).unwrap();
        let reference = h.backward(f2).unwrap();
        prop_assert_eq!(&got, reference.get(w).unwrap());
    }
}

proptest! {
    #![proptest_config(seeded(64))]

    #[test]
    fn softmax_rows_are_distributions(x in tensor(&[4, 6], -50.0, 50.0)) {
        let mut g = Graph::new();
        let v = g.constant(x).unwrap();
        let s = g.softmax(v).unwrap();
        for row in g.value(s).data().chunks_exact(6) {
            let ok = row.iter().all(|&p| p > 0.0 || row.iter().any(|&q| q > 0.99));
            prop_assert!(ok);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn classify_is_scale_invariant(h in tensor(&[3, 64], -2.0, 2.0), c in 0.01f64..100.0, cw in prop::collection::vec(0.01f64..100.0, 5), seed in 0u64..1000) {
        let model = Model::init(ArchConfig::default(), &mut rng::stream(seed, "init")).unwrap();
        let probs = |h: &Tensor, w_scale: &[f64]| {
            let mut m = model.clone();
            let last = m.parameters().len() - 1;
            let k = w_scale.len();
            for (i, v) in m.parameters_mut()[last].data_mut().iter_mut().enumerate() {
                *v *= w_scale[i % k];
            }
            let mut g = Graph::new();
            let vars = m.bind(&mut g, false).unwrap();
            let hv = g.constant(h.clone()).unwrap();
            let p = m.classify(&mut g, &vars, hv).unwrap();
            let l = m.scaled_logits(&mut g, &vars, hv).unwrap();
            (g.value(p).clone(), g.value(l).clone())
        };
        let (base, logits) = probs(&h, &[1.0; 5]);
        let (scaled, _) = probs(&h.map(|v| v * c), &cw);
        prop_assert!(base.max_abs_diff(&scaled) < 1e-9);
        let t = model.config().temperature;
        prop_assert!(logits.data().iter().all(|&l| (-1.0..=1.0).contains(&(l * t))));
    }

    #[test]
    fn rss_matches_brute_force(logits in tensor(&[200, 5], -20.0, 20.0), delta in 0.0f64..8.0, alpha in 0.5f64..0.999) {
        let mut probs = logits.clone();
        for row in probs.data_mut().chunks_exact_mut(5) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            row.iter_mut().for_each(|v| *v = (*v - m).exp() / z);
        }
        let pred = Prediction { scaled_logits: logits.clone(), probs: probs.clone() };
        let set = select_reliable(&pred, delta, alpha, 0).unwrap();
        let mut expected = Vec::new();
        for i in 0..200 {
            let l = logits.row(i);
            let p = probs.row(i);
            let mut sorted = l.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let pmax = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if sorted[0] - sorted[1] > delta || pmax > alpha {
                expected.push((i, pseudo_label(p)));
            }
        }
        let got: Vec<(usize, usize)> = set.members().iter().map(|s| (s.index, s.pseudo_label)).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn pairs_share_labels(labels in prop::collection::vec(0u32..4, 1..40), student_labels in prop::collection::vec(0usize..4, 0..30), seed in 0u64..1000) {
        let source = SampleSet::new([1, 1, 1], vec![0.0; labels.len()], labels);
        let members = student_labels.iter().enumerate().map(|(i, &y)| Student { index: i, pseudo_label: y, confidence: 1.0, margin: 1.0 }).collect();
        let students = StudentSet::new(0, 4, members);
        let batch = sample_pair_batch(&source, &SampleSet::empty([1, 1, 1]), &students, 16, &mut rng::stream(seed, "pairs")).unwrap();
        for pair in &batch.pairs {
            match pair.student {
                Some(s) => prop_assert_eq!(student_labels[s], pair.teacher.label),
                None => prop_assert!(!student_labels.contains(&pair.teacher.label)),
            }
        }
    }

    #[test]
    fn lambda_is_monotone(a in 0.0f64..1.0, b in 0.0f64..1.0, m in 0.5f64..20.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(lambda_rampup(lo, m) < lambda_rampup(hi, m));
        prop_assert!((0.0..1.0).contains(&lambda_rampup(hi, m)));
    }

    #[test]
    fn kl_is_non_negative(a in tensor(&[3, 4], 0.01, 1.0), s in tensor(&[3, 4], 0.01, 1.0)) {
        let norm = |t: Tensor| {
            let mut t = t;
            for row in t.data_mut().chunks_exact_mut(4) {
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
            }
            t
        };
        let mut g = Graph::new();
        let av = g.constant(norm(a)).unwrap();
        let sv = g.leaf(norm(s), true).unwrap();
        let kl = pair_kl(&mut g, av, sv).unwrap();
        prop_assert!(g.value(kl).item().unwrap() >= -1e-12);
    }

    #[test]
    fn ag_blend_interpolates_stats(z in tensor(&[1, 2, 4, 4], -3.0, 3.0), tm in tensor(&[2], -2.0, 2.0), ts in tensor(&[2], 0.1, 2.0), eps in 0.0f64..=1.0) {
        let teacher = ChannelStats { mean: tm.data().to_vec(), std: ts.data().to_vec() };
        let own = feature_stats(&z).unwrap();
        prop_assume!(own.std.iter().all(|&s| s > 1e-3));
        let out = ag_blend(&z, &[&teacher], &[eps]).unwrap();
        let got = feature_stats(&out).unwrap();
        for c in 0..2 {
            let beta = eps * teacher.mean[c] + (1.0 - eps) * own.mean[c];
            let gamma = eps * teacher.std[c] + (1.0 - eps) * own.std[c];
            prop_assert!((got.mean[c] - beta).abs() < 1e-5);
            prop_assert!((got.std[c] - gamma).abs() < 1e-5);
        }
        let same = ag_blend(&z, &[&teacher], &[0.0]).unwrap();
        prop_assert!(same.max_abs_diff(&z) < 1e-5);
    }

    #[test]
    fn margin_is_non_negative(l in prop::collection::vec(-10.0f64..10.0, 2..8)) {
        prop_assert!(top_two_margin(&l) >= 0.0);
    }
}

proptest! {
    #![proptest_config(seeded(6))]

    #[test]
    fn dataset_round_trips(seed in 0u64..10_000, shots in 0usize..4) {
        let spec = DomainSpec { seed, samples_per_class: 16, ..DomainSpec::default() };
        let data = build_dataset(&spec, "source", "target", shots, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        prop_assert_eq!(read_dataset(dir.path()).unwrap(), data.clone());
        prop_assert_eq!(build_dataset(&spec, "source", "target", shots, 2).unwrap(), data);
    }
}

#[test]
fn pair_sampling_is_uniform() {
    let members = (0..4)
        .map(|i| Student {
            index: 10 + i,
            pseudo_label: 0,
            confidence: 1.0,
            margin: 1.0,
        })
        .collect();
    let students = StudentSet::new(0, 1, members);
    let source = SampleSet::new([1, 1, 1], vec![0.0], vec![0]);
    let mut r = rng::stream(42, "uniformity");
    let mut counts = [0usize; 4];
    let mut draws = 0;
    while draws < 100_000 {
        let batch = sample_pair_batch(&source, &SampleSet::empty([1, 1, 1]), &students, 32, &mut r).unwrap();
        for p in &batch.pairs {
            counts[p.student.unwrap() - 10] += 1;
            draws += 1;
        }
    }
    for c in counts {
        let share = c as f64 / draws as f64;
        assert!((share - 0.25).abs() < 0.01, "share {share}");
    }
}

#[test]
fn fused_forward_matches_two_stage() {
    let model = Model::init(ArchConfig::default(), &mut rng::stream(3, "init")).unwrap();
    let data: Vec<f64> = (0..4 * 3 * 256).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
    let x = Tensor::new(vec![4, 3, 16, 16], data).unwrap();
    let fused = model.predict(&x).unwrap();
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true).unwrap();
    let xv = g.constant(x).unwrap();
    let f = model.extract(&mut g, &vars, xv).unwrap();
    let p = model.classify(&mut g, &vars, f.embedding).unwrap();
    assert_eq!(g.value(p), &fused.probs);
}
