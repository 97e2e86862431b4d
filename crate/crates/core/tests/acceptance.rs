//! End-to-end checks of the library's headline guarantees: gradient
//! correctness, attention-window semantics, the materialized-score budget,
//! schedule shapes, metric-oracle agreement, and the training behaviors the
//! architecture exists for. Each test prints one `ACCEPTANCE <name>: PASS`
//! line with its measured numbers.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use actseg_core::data::{generate_synthetic, FeatureSequence, SyntheticSpec};
use actseg_core::metrics::{
    extract_segments, edit_score, f1_at_k, DatasetEval, F1Counts, Segment,
};
use actseg_core::model::{
    alpha_schedule, argmax_rows, closed_form_score_count, dilation_schedule, window_schedule,
    Model, ModelConfig,
};
use actseg_core::tensor::ops::banded_attention;
use actseg_core::train::{classification_loss, fit, smoothing_loss, total_loss, TrainConfig};
use actseg_core::{Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

fn random_tensor<S: Scalar>(rng: &mut ChaCha12Rng, rows: usize, cols: usize) -> Tensor<S> {
    let values = (0..rows * cols)
        .map(|_| S::from_f64(rng.random_range(-1.5..1.5)))
        .collect();
    Tensor::from_vec(rows, cols, values).expect("consistent shape")
}

// ---------------------------------------------------------------- gradients

#[test]
fn gradient_correctness() {
    let started = Instant::now();
    let config = ModelConfig {
        num_blocks: 3,
        num_decoders: 1,
        feature_dim: 12,
        model_dim: 8,
        num_classes: 3,
        input_dropout: 0.0,
        alpha_decay: 0.5,
        lambda: 0.25,
        window_base: 2,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let model = Model::<f64>::init(config, &mut rng).unwrap();
    let frames = 16;
    let input = random_tensor::<f64>(&mut rng, frames, 12);
    let labels: Vec<usize> = (0..frames).map(|_| rng.random_range(0..3)).collect();

    let loss_value = |model: &Model<f64>| -> f64 {
        let mut tape = Tape::inference();
        let mut unused = ChaCha12Rng::seed_from_u64(0);
        let out = model.forward(&mut tape, &input, false, &mut unused, None).unwrap();
        let loss = total_loss(&mut tape, &out.stages, &labels, 0.25).unwrap();
        loss.total_value()
    };

    let mut tape = Tape::recording();
    let mut unused = ChaCha12Rng::seed_from_u64(0);
    let out = model.forward(&mut tape, &input, false, &mut unused, None).unwrap();
    let loss = total_loss(&mut tape, &out.stages, &labels, 0.25).unwrap();
    model.zero_grads();
    tape.backward(&loss.total).unwrap();

    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut tensors = 0;
    for (name, param) in model.parameters() {
        let analytic = param.grad().unwrap_or_else(|| panic!("no gradient on {name}"));
        let base = param.to_vec();
        let mut tensor_worst = 0.0f64;
        for i in 0..base.len() {
            param.update_values(|v| v[i] = base[i] + h);
            let plus = loss_value(&model);
            param.update_values(|v| v[i] = base[i] - h);
            let minus = loss_value(&model);
            param.update_values(|v| v[i] = base[i]);
            let numeric = (plus - minus) / (2.0 * h);
            // the floor keeps identically-zero gradients (the key bias
            // cancels inside softmax) from turning rounding noise into a
            // spurious relative error
            let scale = analytic[i].abs().max(numeric.abs()).max(1e-5);
            tensor_worst = tensor_worst.max((analytic[i] - numeric).abs() / scale);
        }
        assert!(
            tensor_worst < 1e-4,
            "{name}: max relative error {tensor_worst:.3e} against finite differences"
        );
        worst = worst.max(tensor_worst);
        tensors += 1;
    }
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "ACCEPTANCE gradient-correctness: PASS (max rel err {worst:.2e} over {tensors} tensors, {:.1}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- attention

/// Straightforward reference attention over a clipped window, in plain f64
/// loops: per row, softmax of scaled dot products, then the weighted sum.
fn reference_attention(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    window: usize,
) -> Vec<f64> {
    let (t, d) = q.shape();
    let dv = v.cols();
    let half = (window / 2).min(t - 1);
    let scale = 1.0 / (d as f64).sqrt();
    let qv = q.to_vec();
    let kv = k.to_vec();
    let vv = v.to_vec();
    let mut out = vec![0.0; t * dv];
    for row in 0..t {
        let lo = row.saturating_sub(half);
        let hi = (row + half).min(t - 1);
        let mut scores: Vec<f64> = (lo..=hi)
            .map(|j| {
                (0..d).map(|c| qv[row * d + c] * kv[j * d + c]).sum::<f64>() * scale
            })
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for s in &mut scores {
            *s = (*s - max).exp();
        }
        let norm: f64 = scores.iter().sum();
        for (offset, j) in (lo..=hi).enumerate() {
            let p = scores[offset] / norm;
            for c in 0..dv {
                out[row * dv + c] += p * vv[j * dv + c];
            }
        }
    }
    out
}

#[test]
fn windowed_attention_oracle() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mut max_full_err = 0.0f64;
    let mut max_band_err = 0.0f64;
    for _ in 0..50 {
        let t = rng.random_range(2..=40);
        let d = rng.random_range(1..=12);
        let q = random_tensor::<f64>(&mut rng, t, d);
        let k = random_tensor::<f64>(&mut rng, t, d);
        let v = random_tensor::<f64>(&mut rng, t, d);

        // a window at least twice the length must equal full attention
        let wide = 2 * t + 2 * rng.random_range(0..4);
        let mut tape = Tape::inference();
        let (out, _) = banded_attention(&mut tape, &q, &k, &v, wide, None).unwrap();
        let full = reference_attention(&q, &k, &v, 2 * t);
        for (a, b) in out.to_vec().iter().zip(&full) {
            max_full_err = max_full_err.max((a - b).abs());
        }

        // a clipped window must equal the windowed reference, row by row
        let narrow = 2 * rng.random_range(1..=t);
        let (out, _) = banded_attention(&mut tape, &q, &k, &v, narrow, None).unwrap();
        let reference = reference_attention(&q, &k, &v, narrow);
        for (a, b) in out.to_vec().iter().zip(&reference) {
            max_band_err = max_band_err.max((a - b).abs());
        }

        // every row of the weight matrix: sums to one, zero outside window
        let half = (narrow / 2).min(t - 1);
        for anchor in 0..t {
            let (_, info) =
                banded_attention(&mut tape, &q, &k, &v, narrow, Some(anchor)).unwrap();
            let row = info.anchor_row.expect("anchor row requested");
            assert_eq!(row.len(), t);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "row {anchor} sums to {sum}");
            for (j, &w) in row.iter().enumerate() {
                let inside = j + half >= anchor && j <= anchor + half;
                if !inside {
                    assert_eq!(w, 0.0, "weight at ({anchor}, {j}) outside the window");
                }
            }
        }
    }
    assert!(max_full_err <= 1e-6, "full-window deviation {max_full_err:.3e}");
    assert!(max_band_err <= 1e-6, "windowed deviation {max_band_err:.3e}");
    println!(
        "ACCEPTANCE attention-oracle: PASS (50 configs, full-window err {max_full_err:.1e}, windowed err {max_band_err:.1e})"
    );
}

// ------------------------------------------------------------- score budget

#[test]
fn memory_claim() {
    let started = Instant::now();
    let frames = 5000;
    let blocks = 9;
    let config = ModelConfig {
        num_blocks: blocks,
        num_decoders: 0,
        feature_dim: 4,
        model_dim: 4,
        num_classes: 2,
        input_dropout: 0.0,
        alpha_decay: 0.5,
        lambda: 0.25,
        window_base: 2,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let model = Model::<f32>::init(config, &mut rng).unwrap();
    let input = random_tensor::<f32>(&mut rng, frames, 4);
    let mut tape = Tape::inference();
    let out = model.forward(&mut tape, &input, false, &mut rng, None).unwrap();

    let measured: u64 = out.encoder_blocks.iter().map(|b| b.scores_materialized).sum();
    let closed = closed_form_score_count(frames, blocks);
    assert_eq!(measured, closed, "instrumented count disagrees with the closed form");
    assert_eq!(measured, 5_067_108);
    let budget = 2 * (1u64 << blocks) * frames as u64;
    assert!(measured <= budget, "{measured} exceeds the 2*2^J*T budget {budget}");
    let full = blocks as u64 * (frames as u64) * (frames as u64);
    let ratio = full as f64 / measured as f64;
    assert!(ratio > 40.0, "ratio {ratio:.1} not above 40");
    let elapsed = started.elapsed();
    assert!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    println!(
        "ACCEPTANCE memory-claim: PASS (T={frames} J={blocks}: {measured} scores <= {budget}, ratio {ratio:.1}, {:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ----------------------------------------------------------------- schedules

#[test]
fn schedule_shapes() {
    for i in 1..=9usize {
        assert_eq!(window_schedule(i).unwrap(), 1 << i, "window of block {i}");
        assert_eq!(dilation_schedule(i).unwrap(), 1 << i, "dilation of block {i}");
    }
    assert_eq!(window_schedule(9).unwrap(), 512);
    assert_eq!(alpha_schedule(0.5, 1).unwrap(), 1.0);
    let mut previous = alpha_schedule(0.5, 1).unwrap();
    for k in 2..=6 {
        let alpha = alpha_schedule(0.5, k).unwrap();
        assert!(alpha < previous, "alpha({k}) = {alpha} did not decrease");
        previous = alpha;
    }
    println!("ACCEPTANCE schedules: PASS (window 2^i with 2^9=512, alpha starts at 1 and strictly decays)");
}

// ------------------------------------------------------------ metric oracles

/// Memoized-recursion Levenshtein, structurally unlike the two-row DP it
/// cross-checks.
fn oracle_edit_distance(a: &[usize], b: &[usize]) -> usize {
    fn go(
        a: &[usize],
        b: &[usize],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), usize>,
    ) -> usize {
        if i == a.len() {
            return b.len() - j;
        }
        if j == b.len() {
            return a.len() - i;
        }
        if let Some(&v) = memo.get(&(i, j)) {
            return v;
        }
        let v = if a[i] == b[j] {
            go(a, b, i + 1, j + 1, memo)
        } else {
            1 + go(a, b, i + 1, j + 1, memo)
                .min(go(a, b, i + 1, j, memo))
                .min(go(a, b, i, j + 1, memo))
        };
        memo.insert((i, j), v);
        v
    }
    go(a, b, 0, 0, &mut HashMap::new())
}

/// Reference segment matcher: for each prediction in order, scan every
/// ground-truth segment for the best same-label IoU and claim it greedily.
fn oracle_f1_counts(pred: &[Segment], gt: &[Segment], tau: f64) -> F1Counts {
    let iou = |p: &Segment, g: &Segment| -> f64 {
        if p.label != g.label {
            return 0.0;
        }
        let inter = p.end.min(g.end) as i64 - p.start.max(g.start) as i64;
        if inter <= 0 {
            return 0.0;
        }
        let union = (p.end - p.start) + (g.end - g.start) - inter as usize;
        inter as f64 / union as f64
    };
    let mut used = vec![false; gt.len()];
    let mut counts = F1Counts::default();
    for p in pred {
        let mut best = 0.0;
        let mut best_index = None;
        for (i, g) in gt.iter().enumerate() {
            let x = iou(p, g);
            if x > best {
                best = x;
                best_index = Some(i);
            }
        }
        if let Some(i) = best_index {
            if best >= tau && !used[i] {
                used[i] = true;
                counts.true_positives += 1;
                continue;
            }
        }
        counts.false_positives += 1;
    }
    counts.false_negatives = used.iter().filter(|&&u| !u).count();
    counts
}

#[test]
fn metrics_oracle_equivalence() {
    let mut rng = ChaCha12Rng::seed_from_u64(99);
    for instance in 0..1000 {
        let t = rng.random_range(1..=50);
        let c = rng.random_range(1..=5);
        let pred: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();
        let gt: Vec<usize> = (0..t).map(|_| rng.random_range(0..c)).collect();

        let pred_segments = extract_segments(&pred);
        let gt_segments = extract_segments(&gt);
        let p_labels: Vec<usize> = pred_segments.iter().map(|s| s.label).collect();
        let g_labels: Vec<usize> = gt_segments.iter().map(|s| s.label).collect();
        let distance = oracle_edit_distance(&p_labels, &g_labels);
        let norm = p_labels.len().max(g_labels.len()) as f64;
        let expected = (100.0 * (1.0 - distance as f64 / norm)).max(0.0);
        assert_eq!(
            edit_score(&pred, &gt).unwrap(),
            expected,
            "edit mismatch on instance {instance}"
        );

        let mut previous = f64::INFINITY;
        for tau in [0.05, 0.10, 0.25, 0.50, 0.75, 1.0] {
            let (f1, counts) = f1_at_k(&pred_segments, &gt_segments, tau).unwrap();
            let oracle = oracle_f1_counts(&pred_segments, &gt_segments, tau);
            assert_eq!(counts, oracle, "match counts differ on instance {instance}, tau {tau}");
            // same counts, f1 recomputed through an algebraically equal form
            let tp = counts.true_positives as f64;
            let alternative = if counts.true_positives == 0 {
                0.0
            } else {
                200.0 * tp / (2.0 * tp + counts.false_positives as f64 + counts.false_negatives as f64)
            };
            assert!((f1 - alternative).abs() <= 1e-9);
            assert!(f1 <= previous, "F1 rose as tau grew on instance {instance}");
            previous = f1;
        }
    }
    println!("ACCEPTANCE metrics-oracle: PASS (1000 instances: edit exact, matching exact, F1 monotone in tau)");
}

// ------------------------------------------------------------ training runs

fn to_dataset(data: &[(FeatureSequence, Vec<usize>)]) -> Vec<(Tensor<f32>, Vec<usize>)> {
    data.iter()
        .map(|(seq, labels)| (seq.to_tensor::<f32>(), labels.clone()))
        .collect()
}

/// Final-stage predictions in evaluation mode (dropout off), pooled over a
/// set of sequences.
fn evaluation_accuracy(model: &Model<f32>, dataset: &[(Tensor<f32>, Vec<usize>)]) -> f64 {
    let mut correct = 0usize;
    let mut frames = 0usize;
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    for (features, labels) in dataset {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, features, false, &mut rng, None).unwrap();
        let pred = argmax_rows(out.final_logits());
        correct += pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        frames += labels.len();
    }
    100.0 * correct as f64 / frames as f64
}

#[test]
fn overfit_smoke() {
    let started = Instant::now();
    let spec = SyntheticSpec {
        noise_sigma: 1.0,
        seed: 42,
        ..SyntheticSpec::uniform(5, 32)
    };
    let data = generate_synthetic(&spec, 5, (500, 500)).unwrap();
    let dataset = to_dataset(&data);

    let config = ModelConfig {
        num_blocks: 6,
        num_decoders: 2,
        feature_dim: 32,
        model_dim: 32,
        num_classes: 5,
        input_dropout: 0.3,
        alpha_decay: 0.5,
        lambda: 0.25,
        window_base: 2,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let model = Model::<f32>::init(config, &mut rng).unwrap();
    let train_config = TrainConfig {
        epochs: 200,
        learning_rate: 5e-4,
    };
    fit(&model, &dataset, &train_config, &mut rng).unwrap();

    let accuracy = evaluation_accuracy(&model, &dataset);
    let elapsed = started.elapsed();
    assert!(
        accuracy >= 99.0,
        "training accuracy {accuracy:.2}% after 200 epochs"
    );
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    println!(
        "ACCEPTANCE overfit-smoke: PASS (train accuracy {accuracy:.2}% in {:.0}s)",
        elapsed.as_secs_f64()
    );
}

/// Dataset-level Edit and F1@50 of a model over a held-out set.
fn held_out_scores(model: &Model<f32>, held_out: &[(Tensor<f32>, Vec<usize>)]) -> (f64, f64) {
    let mut aggregate = DatasetEval::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    for (features, labels) in held_out {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, features, false, &mut rng, None).unwrap();
        let pred = argmax_rows(out.final_logits());
        aggregate.add(&pred, labels).unwrap();
    }
    let report = aggregate.report();
    (report.edit, report.f1[2])
}

/// Fraction of held-out frames a nearest-centroid classifier gets right,
/// with centroids estimated from the training split: the ceiling any
/// frame-independent classifier can hope for on this data.
fn nearest_centroid_accuracy(
    train: &[(FeatureSequence, Vec<usize>)],
    held_out: &[(FeatureSequence, Vec<usize>)],
    num_classes: usize,
    dim: usize,
) -> f64 {
    let mut sums = vec![vec![0.0f64; dim]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (seq, labels) in train {
        for (t, &label) in labels.iter().enumerate() {
            for (sum, &x) in sums[label].iter_mut().zip(seq.frame(t)) {
                *sum += f64::from(x);
            }
            counts[label] += 1;
        }
    }
    for (sum, &count) in sums.iter_mut().zip(&counts) {
        for s in sum {
            *s /= count.max(1) as f64;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (seq, labels) in held_out {
        for (t, &label) in labels.iter().enumerate() {
            let frame = seq.frame(t);
            let nearest = (0..num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = sums[a]
                        .iter()
                        .zip(frame)
                        .map(|(m, &x)| (m - f64::from(x)).powi(2))
                        .sum();
                    let db: f64 = sums[b]
                        .iter()
                        .zip(frame)
                        .map(|(m, &x)| (m - f64::from(x)).powi(2))
                        .sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            correct += usize::from(nearest == label);
            total += 1;
        }
    }
    100.0 * correct as f64 / total as f64
}

#[test]
fn refinement_trend() {
    let started = Instant::now();
    // noise tuned so a frame-independent classifier lands near 90%:
    // hard enough that the encoder over-segments, easy enough to learn
    let spec = SyntheticSpec {
        min_len: 10,
        max_len: 30,
        noise_sigma: 1.4,
        seed: 2024,
        ..SyntheticSpec::uniform(5, 16)
    };
    let data = generate_synthetic(&spec, 32, (150, 250)).unwrap();
    let (train_raw, held_raw) = data.split_at(12);
    let train_set = to_dataset(train_raw);
    let held_out = to_dataset(held_raw);
    assert_eq!(held_out.len(), 20);
    let ceiling = nearest_centroid_accuracy(train_raw, held_raw, 5, 16);

    let config = |num_decoders: usize| ModelConfig {
        num_blocks: 4,
        num_decoders,
        feature_dim: 16,
        model_dim: 16,
        num_classes: 5,
        input_dropout: 0.3,
        alpha_decay: 0.5,
        lambda: 0.25,
        window_base: 2,
    };
    let train_config = TrainConfig {
        epochs: 60,
        learning_rate: 5e-4,
    };

    let mut refined = (0.0, 0.0);
    let mut encoder_only = (0.0, 0.0);
    for seed in [1u64, 2, 3] {
        for (decoders, totals) in [(3usize, &mut refined), (0usize, &mut encoder_only)] {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let model = Model::<f32>::init(config(decoders), &mut rng).unwrap();
            fit(&model, &train_set, &train_config, &mut rng).unwrap();
            let (edit, f1) = held_out_scores(&model, &held_out);
            totals.0 += edit / 3.0;
            totals.1 += f1 / 3.0;
        }
    }

    let elapsed = started.elapsed();
    println!(
        "ACCEPTANCE refinement-trend: frame ceiling {ceiling:.1}%; 3 decoders edit {:.1} f1@50 {:.1} vs encoder-only edit {:.1} f1@50 {:.1} ({:.0}s)",
        refined.0, refined.1, encoder_only.0, encoder_only.1, elapsed.as_secs_f64()
    );
    assert!(
        refined.0 > encoder_only.0,
        "mean edit did not improve: {:.2} vs {:.2}",
        refined.0,
        encoder_only.0
    );
    assert!(
        refined.1 >= encoder_only.1,
        "mean F1@50 regressed: {:.2} vs {:.2}",
        refined.1,
        encoder_only.1
    );
    println!(
        "ACCEPTANCE refinement-trend: PASS (edit +{:.1}, f1@50 +{:.1} averaged over 3 seeds)",
        refined.0 - encoder_only.0,
        refined.1 - encoder_only.1
    );
}

// ------------------------------------------------------------- loss algebra

#[test]
fn loss_sanity() {
    // uniform logits: cross entropy is exactly the log class count
    let mut tape = Tape::<f64>::inference();
    let logits = Tensor::zeros(6, 4);
    let labels = vec![0, 1, 2, 3, 0, 2];
    let cls = classification_loss(&mut tape, &logits, &labels).unwrap();
    assert!((cls.item() - 4.0f64.ln()).abs() <= 1e-9);

    // time-constant logits: adjacent probability rows are identical
    let constant = Tensor::from_vec(5, 3, vec![0.3, -1.0, 2.0].repeat(5)).unwrap();
    let smo = smoothing_loss(&mut tape, &constant).unwrap();
    assert_eq!(smo.item(), 0.0);

    // two-frame composition at lambda = 0.25, checked against hand algebra:
    // rows [ln 2, 0] and [0, ln 2] give probabilities [2/3, 1/3], [1/3, 2/3]
    let two = Tensor::from_vec(2, 2, vec![2.0f64.ln(), 0.0, 0.0, 2.0f64.ln()]).unwrap();
    let stage = actseg_core::model::StagePrediction {
        name: "encoder".to_string(),
        logits: two,
    };
    let labels = vec![0, 0];
    let loss = total_loss(&mut tape, &[stage], &labels, 0.25).unwrap();
    let expected_cls = -((2.0f64 / 3.0).ln() + (1.0f64 / 3.0).ln()) / 2.0;
    let expected_smo = 2.0 * (1.0f64 / 3.0).powi(2) / 4.0;
    let expected = expected_cls + 0.25 * expected_smo;
    assert!((loss.total_value() - expected).abs() <= 1e-12);
    assert!((loss.cls_sum() - expected_cls).abs() <= 1e-12);
    assert!((loss.smo_sum() - expected_smo).abs() <= 1e-12);

    println!(
        "ACCEPTANCE loss-sanity: PASS (uniform = ln C, constant smoothing = 0, lambda composition to 1e-12)"
    );
}
