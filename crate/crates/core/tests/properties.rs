//! Property tests for invariants that must hold for every input.

use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;

use ser_forge::audio_io::{decode_wav, encode_wav_pcm16, pad_or_trim, peak_normalize, Waveform};
use ser_forge::dataset::{
    batch_order_hash, make_batches, parse_crema_filename, speaker_independent_split, Emotion,
    SampleMeta, Split,
};
use ser_forge::eval::{argmax, confusion, metrics};
use ser_forge::heads::{attentive_pooling, init_head, HeadConfig, HeadKind};
use ser_forge::models::{assemble, patchify};
use ser_forge::nn::optim::{clip_grad_norm, cosine_lr};
use ser_forge::nn::{loss_coefficients, Gradients, Graph, LossMode, ParamStore, Tensor};
use ser_forge::rng::stream;

fn manifest(per_actor: &[usize]) -> Vec<SampleMeta> {
    per_actor
        .iter()
        .enumerate()
        .flat_map(|(a, &n)| {
            (0..n).map(move |i| SampleMeta {
                path: PathBuf::from(format!("{}_{i}.wav", 1001 + a)),
                actor_id: 1001 + a as u32,
                sentence: format!("S{i}"),
                emotion: Emotion::ALL[i % 6],
                intensity: "XX".into(),
            })
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_partitions_actors_and_samples(
        per_actor in prop::collection::vec(1usize..40, 3..60),
        seed in any::<u64>(),
    ) {
        let samples = manifest(&per_actor);
        let split = speaker_independent_split(&samples, [0.7, 0.15, 0.15], seed).unwrap();
        let sets: Vec<BTreeSet<u32>> = Split::ALL
            .iter()
            .map(|&s| split.actors(s).iter().copied().collect())
            .collect();
        for s in &sets {
            prop_assert!(!s.is_empty());
        }
        let total: usize = sets.iter().map(BTreeSet::len).sum();
        let union: BTreeSet<u32> = sets.iter().flatten().copied().collect();
        prop_assert_eq!(total, per_actor.len());
        prop_assert_eq!(union.len(), per_actor.len());
        let selected: usize = Split::ALL.iter().map(|&s| split.select(&samples, s).len()).sum();
        prop_assert_eq!(selected, samples.len());
        // same seed, same answer
        let again = speaker_independent_split(&samples, [0.7, 0.15, 0.15], seed).unwrap();
        prop_assert_eq!(again, split);
    }

    #[test]
    fn batches_are_a_permutation(n in 0usize..400, bs in 1usize..50, seed in any::<u64>(), epoch in 0u64..100) {
        let batches = make_batches(n, bs, seed, epoch);
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        for b in batches.iter().rev().skip(1) {
            prop_assert_eq!(b.len(), bs);
        }
        let mut all: Vec<usize> = batches.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(
            batch_order_hash(&batches),
            batch_order_hash(&make_batches(n, bs, seed, epoch))
        );
    }

    #[test]
    fn confusion_margins_match_label_counts(
        pairs in prop::collection::vec((0usize..6, 0usize..6), 1..300),
        cut in any::<prop::sample::Index>(),
    ) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let cm = confusion(&truth, &pred, 6).unwrap();
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        for c in 0..6 {
            prop_assert_eq!(cm.row_sum(c), truth.iter().filter(|&&t| t == c).count() as u64);
            prop_assert_eq!(cm.col_sum(c), pred.iter().filter(|&&p| p == c).count() as u64);
        }
        // merging the matrices of two halves gives the matrix of the whole
        let k = cut.index(pairs.len());
        let mut left = confusion(&truth[..k], &pred[..k], 6).unwrap();
        left.merge(&confusion(&truth[k..], &pred[k..], 6).unwrap());
        prop_assert_eq!(&left, &cm);
        let m = metrics(&cm).unwrap();
        for v in [m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected(bad in 6usize..100) {
        prop_assert!(confusion(&[0, bad], &[0, 1], 6).is_err());
        prop_assert!(confusion(&[0, 1], &[bad, 1], 6).is_err());
    }

    #[test]
    fn softmax_preserves_argmax(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let v = g.constant(Tensor::vector(z.clone()));
        let p = g.softmax(v);
        let probs = g.value(p).data();
        prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let best = argmax(&z);
        // ties in z resolve to the lowest index in both
        prop_assert_eq!(argmax(probs), best);
    }

    #[test]
    fn attention_weights_form_a_distribution(
        t in 1usize..30,
        d in 1usize..12,
        scale in 0.01f64..100.0,
        seed in any::<u64>(),
    ) {
        let cfg = HeadConfig {
            kind: HeadKind::AttentivePool,
            d_in: Some(d),
            d_att: 4,
            ..HeadConfig::default()
        };
        let mut s = ParamStore::new();
        init_head(&mut s, &mut stream(&[seed]), &cfg).unwrap();
        let tokens = ser_forge::nn::uniform(&mut stream(&[seed, 1]), &[t, d], scale);
        let mut g = Graph::new(&s);
        let tv = g.constant(tokens);
        let p = attentive_pooling(&mut g, tv).unwrap();
        let alpha = g.value(p.alpha).data();
        prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(alpha.iter().all(|&a| a >= 0.0));
        prop_assert!(g.value(p.sigma).data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn cosine_schedule_decays_from_lr0_to_zero(total in 1usize..5000, lr0 in 1e-6f64..1.0) {
        prop_assert_eq!(cosine_lr(0, total, lr0), lr0);
        prop_assert!(cosine_lr(total, total, lr0).abs() <= 1e-15 * lr0.max(1.0));
        let mut prev = lr0;
        for step in (0..=total).step_by((total / 50).max(1)) {
            let lr = cosine_lr(step, total, lr0);
            prop_assert!((0.0..=lr0).contains(&lr));
            prop_assert!(lr <= prev + 1e-18);
            prev = lr;
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm(v in prop::collection::vec(-100.0f64..100.0, 1..50), max in 0.1f64..10.0) {
        let mut g = Gradients::empty(1);
        g.set(0, Tensor::vector(v.clone()));
        let before = clip_grad_norm(&mut g, max);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((before - norm).abs() <= 1e-9 * norm.max(1.0));
        if norm <= max {
            prop_assert_eq!(g.get(0).unwrap().data(), &v[..]);
        } else {
            prop_assert!((g.global_norm() - max).abs() <= 1e-12 * max);
        }
    }

    #[test]
    fn loss_coefficients_sum_to_one(labels in prop::collection::vec(0usize..6, 1..64)) {
        for mode in [LossMode::Macro, LossMode::Mean] {
            let c = loss_coefficients(&labels, 6, mode, None);
            prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // macro: every present class carries the same total weight
        let c = loss_coefficients(&labels, 6, LossMode::Macro, None);
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        for &k in &present {
            let w: f64 = labels.iter().zip(&c).filter(|(l, _)| **l == k).map(|(_, w)| w).sum();
            prop_assert!((w - 1.0 / present.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn peak_normalization_is_idempotent(samples in prop::collection::vec(-3.0f64..3.0, 1..500)) {
        let w = Waveform::new(samples, 16_000);
        let once = peak_normalize(&w);
        let twice = peak_normalize(&once);
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
        if w.peak() > 0.0 {
            prop_assert!((once.peak() - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn pad_or_trim_hits_the_target_length(len in 0usize..40_000, secs in 0.01f64..2.0) {
        let w = Waveform::new(vec![0.5; len], 16_000);
        let out = pad_or_trim(&w, secs);
        let target = (16_000.0 * secs).round() as usize;
        prop_assert_eq!(out.len(), target);
        let kept = len.min(target);
        prop_assert!(out.samples[..kept].iter().all(|&x| x == 0.5));
        prop_assert!(out.samples[kept..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pcm16_round_trip_is_within_one_step(samples in prop::collection::vec(-1.0f64..1.0, 1..2000)) {
        let w = Waveform::new(samples, 16_000);
        let back = decode_wav(&encode_wav_pcm16(&w).unwrap()).unwrap();
        prop_assert_eq!(back.sample_rate, 16_000);
        prop_assert_eq!(back.len(), w.len());
        for (a, b) in w.samples.iter().zip(&back.samples) {
            prop_assert!((a - b).abs() <= 1.0 / 32_767.0);
        }
    }

    #[test]
    fn assemble_inverts_patchify(
        ph in 1usize..6, pw in 1usize..6,
        extra_f in 0usize..5, extra_b in 0usize..5,
        nf in 1usize..5, nt in 1usize..5,
    ) {
        let (frames, bins) = (nt * pw + extra_f % pw.max(1), nf * ph + extra_b % ph.max(1));
        let x = Tensor::new(&[frames, bins], (0..frames * bins).map(|i| i as f64).collect()).unwrap();
        let (p, grid) = patchify(&x, ph, pw).unwrap();
        prop_assert_eq!((grid.n_freq, grid.n_time), (nf, nt));
        let back = assemble(&p, grid, ph, pw);
        for f in 0..nt * pw {
            for b in 0..nf * ph {
                prop_assert_eq!(back.data()[f * nf * ph + b], x.data()[f * bins + b]);
            }
        }
    }

    #[test]
    fn crema_filenames_round_trip(actor in 1001u32..1092, e in 0usize..6, level in prop::sample::select(vec!["LO", "MD", "HI", "XX"])) {
        let emotion = Emotion::from_index(e).unwrap();
        let name = format!("{actor}_IEO_{}_{level}.wav", emotion.code());
        let m = parse_crema_filename(&name).unwrap();
        prop_assert_eq!(m.actor_id, actor);
        prop_assert_eq!(m.emotion, emotion);
        prop_assert_eq!(m.label(), e);
        prop_assert_eq!(m.intensity, level);
        prop_assert_eq!(Emotion::from_code(emotion.code()), Some(emotion));
    }
}
