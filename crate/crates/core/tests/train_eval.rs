use proptest::prelude::*;
use sdsnet::datagen::{generate, GenSpec};
use sdsnet::models::{EncoderKind, Model, ModelConfig, Precision, SubjectInput};
use sdsnet::train_eval::{
    audit_leakage, cross_validate, evaluate, train, Confusion, FoldPlan, Method, MetricsReport, MetricsRow, TrainConfig,
    TrainError,
};
use sdsnet::{Label, Session};

fn cohort(n: usize, agreement: f64, seed: u64) -> Vec<Session> {
    let spec = GenSpec {
        n_subjects: n,
        sds_agreement: agreement,
        frames_per_clip: 2,
        clip_height: 4,
        clip_width: 4,
        seed,
        ..GenSpec::default()
    };
    generate(&spec).unwrap()
}

fn sds_only() -> ModelConfig {
    ModelConfig { encoder: EncoderKind::None, use_time: false, dtype: Precision::F64, ..ModelConfig::tiny() }
}

fn setup(n: usize, agreement: f64) -> (Vec<SubjectInput<f64>>, FoldPlan) {
    let sessions = cohort(n, agreement, 9);
    let data: Vec<_> = sessions.iter().map(|s| SubjectInput::from_session(s, &sds_only()).unwrap()).collect();
    let ids: Vec<_> = sessions.iter().map(|s| (s.subject_id.clone(), s.label)).collect();
    (data, FoldPlan::stratified(&ids, 5, 0).unwrap())
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let (data, plan) = setup(20, 0.8);
    let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
    let trained = train(&data, &plan, Some(0), &sds_only(), &cfg, 3).unwrap();
    assert_eq!(trained.model, Model::<f64>::new(sds_only(), 3).unwrap());
    assert!(trained.log.epochs.is_empty());
}

#[test]
fn frozen_parameters_give_constant_loss() {
    let (data, plan) = setup(20, 0.8);
    let cfg = TrainConfig { epochs: 4, learning_rate: 0.0, ..TrainConfig::default() };
    let trained = train(&data, &plan, Some(1), &sds_only(), &cfg, 2).unwrap();
    let losses = trained.log.losses();
    assert!(losses.iter().all(|&l| l == losses[0]), "{losses:?}");
    assert_eq!(trained.model, Model::<f64>::new(sds_only(), 2).unwrap());
}

#[test]
fn reruns_are_bit_identical() {
    let (data, plan) = setup(20, 0.8);
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-3, ..TrainConfig::default() };
    let a = train(&data, &plan, Some(2), &sds_only(), &cfg, 4).unwrap();
    let b = train(&data, &plan, Some(2), &sds_only(), &cfg, 4).unwrap();
    assert_eq!(a.log, b.log);
    for ((_, x), (_, y)) in a.model.params().iter().zip(b.model.params().iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn separable_answers_train_with_falling_loss() {
    let (data, plan) = setup(40, 1.0);
    let cfg = TrainConfig { epochs: 15, ..TrainConfig::default() };
    let trained = train(&data, &plan, Some(0), &sds_only(), &cfg, 1).unwrap();
    let losses = trained.log.losses();
    for w in losses[2..].windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn held_out_fold_never_enters_a_batch() {
    let (data, plan) = setup(25, 0.8);
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    for fold in 0..5 {
        let trained = train(&data, &plan, Some(fold), &sds_only(), &cfg, 1).unwrap();
        assert_eq!(audit_leakage(&plan, &trained.log).unwrap(), 2 * 20);
    }
}

#[test]
fn leakage_audit_catches_an_injected_subject() {
    let (data, plan) = setup(25, 0.8);
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut log = train(&data, &plan, Some(3), &sds_only(), &cfg, 1).unwrap().log;
    let intruder = plan.members(3)[0].to_string();
    log.epochs[0].batches[0][0] = intruder.clone();
    match audit_leakage(&plan, &log) {
        Err(TrainError::Leakage { subject, fold }) => assert_eq!((subject, fold), (intruder, 3)),
        other => panic!("expected leakage, got {other:?}"),
    }
}

#[test]
fn non_finite_input_aborts_as_divergence() {
    let (mut data, plan) = setup(10, 0.8);
    let cfg_model = ModelConfig { use_time: true, ..sds_only() };
    for d in &mut data {
        d.times = vec![f64::NAN; 20];
    }
    let cfg = TrainConfig { epochs: 2, ..TrainConfig::default() };
    match train(&data, &plan, Some(0), &cfg_model, &cfg, 1) {
        Err(e @ TrainError::Diverged { epoch: 1, last_finite: None, .. }) => assert!(e.is_numeric()),
        other => panic!("expected divergence, got {:?}", other.map(|t| t.log)),
    }
}

#[test]
fn untrained_evaluation_counts_every_held_out_subject() {
    let (data, plan) = setup(30, 0.8);
    let model = Model::<f64>::new(sds_only(), 1).unwrap();
    let total: usize = (0..5).map(|f| evaluate(&model, &data, &plan, Some(f)).unwrap().total()).sum();
    assert_eq!(total, 30);
}

#[test]
fn sum_rule_has_zero_spread_across_seeds() {
    let sessions = cohort(30, 0.8, 5);
    let cfg = TrainConfig { seeds: vec![1, 2, 3, 4, 5], ..TrainConfig::default() };
    let out = cross_validate(&sessions, &[Method::SdsSum], &cfg, 1, &|_| {}).unwrap();
    let s = out.report.summary("sds_sum");
    assert_eq!(s.seeds, 5);
    assert_eq!(s.std, [0.0; 3]);
    assert_eq!(out.report.rows.len(), 25);
    assert!(out.report.to_csv().contains("sds_sum,all,std,,,,,0.000000,0.000000,0.000000"));
}

#[test]
fn too_few_subjects_is_an_error() {
    let sessions = cohort(4, 0.8, 5);
    let cfg = TrainConfig::default();
    assert!(matches!(cross_validate(&sessions, &[Method::SdsSum], &cfg, 1, &|_| {}), Err(TrainError::Config(_))));
}

#[test]
fn fold_plan_sizes() {
    for (n, size) in [(200, 40), (60, 12)] {
        let (_, plan) = setup(n, 0.8);
        assert_eq!(plan.sizes(), vec![size; 5]);
    }
}

#[test]
fn table_counts_give_table_rates() {
    let c = Confusion::new(74, 20, 20, 86);
    let r = c.rates();
    assert_eq!(format!("{:.3} {:.3} {:.3}", r[0], r[1], r[2]), "0.800 0.787 0.811");
    assert_eq!(format!("{:.4} {:.4}", r[1], r[2]), "0.7872 0.8113");
}

#[test]
fn extreme_predictors() {
    let perfect = Confusion::from_pairs([(Label::Depression, Label::Depression), (Label::Normal, Label::Normal)]);
    assert_eq!(perfect.rates(), [1.0; 3]);
    let all_pos = Confusion::from_pairs([Label::Depression, Label::Normal].repeat(5).into_iter().map(|l| (l, Label::Depression)));
    assert_eq!((all_pos.sensitivity(), all_pos.specificity()), (1.0, 0.0));
}

#[test]
fn report_mean_and_std_over_seeds() {
    let mut report = MetricsReport::default();
    for (seed, tp) in [(1, 9), (2, 7)] {
        report.rows.push(MetricsRow { method: "m".into(), fold: 0, seed, confusion: Confusion::new(tp, 10 - tp, 0, 10) });
    }
    let s = report.summary("m");
    // accuracies 0.95 and 0.85
    assert!((s.mean[0] - 0.9).abs() < 1e-12);
    assert!((s.std[0] - (0.005f64).sqrt()).abs() < 1e-12);
    assert!(report.to_table().contains("0.900±0.071"));
}

proptest! {
    #[test]
    fn metric_identities(tp in 0usize..200, fn_ in 0usize..200, fp in 0usize..200, tn in 0usize..200) {
        prop_assume!(tp + fn_ + fp + tn > 0);
        let c = Confusion::new(tp, fn_, fp, tn);
        let [acc, sens, spec] = c.rates();
        let n = (tp + fn_ + fp + tn) as f64;
        prop_assert!((acc - (tp + tn) as f64 / n).abs() < 1e-15);
        if tp + fn_ > 0 {
            prop_assert!((sens - tp as f64 / (tp + fn_) as f64).abs() < 1e-15);
        }
        if tn + fp > 0 {
            prop_assert!((spec - tn as f64 / (tn + fp) as f64).abs() < 1e-15);
        }
        prop_assert!([acc, sens, spec].iter().all(|v| (0.0..=1.0).contains(v)));
        // accuracy is the prevalence-weighted mix of the two class rates
        if tp + fn_ > 0 && tn + fp > 0 {
            let mix = sens * (tp + fn_) as f64 / n + spec * (tn + fp) as f64 / n;
            prop_assert!((acc - mix).abs() < 1e-12);
        }
    }
}
