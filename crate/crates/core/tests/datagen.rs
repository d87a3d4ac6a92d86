use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdsnet::datagen::{generate, plant_signal, CohortSummary, GenSpec};
use sdsnet::ingest::write_store;
use sdsnet::models::sds_sum_baseline;
use sdsnet::tensor::Tensor;
use sdsnet::Label;

fn tiny_clips(spec: GenSpec) -> GenSpec {
    GenSpec { frames_per_clip: 2, clip_height: 4, clip_width: 4, ..spec }
}

#[test]
fn calibrated_cohort_reproduces_questionnaire_confusion() {
    let spec = tiny_clips(GenSpec { n_subjects: 200, prevalence: 0.47, sds_agreement: 0.80, seed: 7, ..GenSpec::default() });
    let s = CohortSummary::of(&generate(&spec).unwrap());
    assert_eq!((s.subjects, s.positives), (200, 94));
    for (got, want) in [(s.tn, 86), (s.fp, 20), (s.fn_, 20), (s.tp, 74)] {
        assert!(got.abs_diff(want) <= 1, "{s}");
    }
}

#[test]
fn perfect_agreement_makes_the_sum_rule_exact() {
    let spec = tiny_clips(GenSpec { n_subjects: 50, sds_agreement: 1.0, seed: 3, ..GenSpec::default() });
    for s in generate(&spec).unwrap() {
        assert_eq!(sds_sum_baseline(&s.answers()).unwrap(), s.label);
    }
}

#[test]
fn same_seed_writes_identical_bytes() {
    let spec = GenSpec { n_subjects: 10, seed: 42, frames_per_clip: 4, clip_height: 8, clip_width: 8, ..GenSpec::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_store(a.path(), &generate(&spec).unwrap()).unwrap();
    write_store(b.path(), &generate(&spec).unwrap()).unwrap();
    let files = |root: &std::path::Path| {
        let mut out = Vec::new();
        for d in std::fs::read_dir(root).unwrap() {
            for f in std::fs::read_dir(d.unwrap().path()).unwrap() {
                let p = f.unwrap().path();
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
        out.sort();
        out
    };
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 10 * 21);
    assert!(fa == fb);
}

#[test]
fn zero_strength_clips_do_not_depend_on_label() {
    let base = GenSpec { n_subjects: 12, prevalence: 0.25, signal_strength: 0.0, seed: 5, frames_per_clip: 4, clip_height: 6, clip_width: 6, ..GenSpec::default() };
    let flipped = GenSpec { prevalence: 0.75, ..base.clone() };
    let (a, b) = (generate(&base).unwrap(), generate(&flipped).unwrap());
    assert!(a.iter().zip(&b).any(|(x, y)| x.label != y.label));
    for (x, y) in a.iter().zip(&b) {
        for (qx, qy) in x.questions.iter().zip(&y.questions) {
            assert_eq!(qx.clip, qy.clip);
        }
    }
}

/// Mid-grey clip with small deterministic texture, far from the clamp.
fn grey_clip(t: usize, h: usize, w: usize) -> Tensor<f32> {
    let mut state = 0x9e37_79b9u32;
    let data = (0..t * h * w)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 17;
            state ^= state << 5;
            0.5 + 0.05 * ((state % 1000) as f32 / 1000.0 - 0.5)
        })
        .collect();
    Tensor::new(vec![t, h, w], data).unwrap()
}

fn frame_means(clip: &Tensor<f32>) -> Vec<f64> {
    let d = clip.dims();
    clip.data().chunks(d[1] * d[2]).map(|f| f.iter().map(|&v| v as f64).sum::<f64>() / f.len() as f64).collect()
}

fn upper_region_variance(clip: &Tensor<f32>) -> f64 {
    let d = clip.dims();
    let series: Vec<f64> = clip
        .data()
        .chunks(d[1] * d[2])
        .map(|f| f[..(d[1] / 2) * d[2]].iter().map(|&v| v as f64).sum::<f64>() / ((d[1] / 2) * d[2]) as f64)
        .collect();
    let mean = series.iter().sum::<f64>() / series.len() as f64;
    series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / series.len() as f64
}

#[test]
fn planted_cue_keeps_frame_means_and_moves_regions() {
    for (h, w) in [(16, 16), (15, 12)] {
        let clip = grey_clip(24, h, w);
        let planted = plant_signal(&clip, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
        for (a, b) in frame_means(&clip).iter().zip(frame_means(&planted)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!(upper_region_variance(&planted) > 100.0 * upper_region_variance(&clip));
    }
}

#[test]
fn prevalence_zero_gives_all_normal() {
    let spec = tiny_clips(GenSpec { n_subjects: 15, prevalence: 0.0, ..GenSpec::default() });
    assert!(generate(&spec).unwrap().iter().all(|s| s.label == Label::Normal));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cohort_invariants(n in 1usize..40, prevalence in 0.0f64..=1.0, agreement in 0.0f64..=1.0, seed: u64) {
        let spec = tiny_clips(GenSpec { n_subjects: n, prevalence, sds_agreement: agreement, seed, ..GenSpec::default() });
        let sessions = generate(&spec).unwrap();
        let s = CohortSummary::of(&sessions);
        prop_assert_eq!(s.positives, (n as f64 * prevalence).round() as usize);
        let negatives = n - s.positives;
        let want_pos = s.positives as f64 * agreement;
        let want_neg = negatives as f64 * agreement;
        prop_assert!((s.tp as f64 - want_pos).abs() <= 1.0);
        prop_assert!((s.tn as f64 - want_neg).abs() <= 1.0);
        for session in &sessions {
            prop_assert!((20..=80).contains(&session.sds_sum()));
            prop_assert!(session.questions.iter().all(|q| q.response_time_sec > 0.0));
            prop_assert!(session.questions.iter().all(|q| q.clip.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }
}
