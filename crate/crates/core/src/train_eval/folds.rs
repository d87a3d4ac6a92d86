use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::Label;

/// Subject to fold assignment for k-fold cross-validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldPlan {
    /// Stratified assignment: each class is shuffled under `seed` and the
    /// classes are dealt round-robin, so fold sizes differ by at most one
    /// and label proportions are as even as the counts allow.
    pub fn stratified(subjects: &[(String, Label)], folds: usize, seed: u64) -> Result<Self, TrainError> {
        if folds < 2 {
            return Err(TrainError::Config(format!("need at least 2 folds, got {folds}")));
        }
        if subjects.len() < folds {
            return Err(TrainError::Config(format!("{} subjects cannot fill {folds} folds", subjects.len())));
        }
        let mut sorted: Vec<&(String, Label)> = subjects.iter().collect();
        sorted.sort_by(|a, b| a.0.cmp(&b.0));
        if let Some(w) = sorted.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(TrainError::Config(format!("duplicate subject id {}", w[0].0)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dealt = Vec::with_capacity(sorted.len());
        for label in [Label::Depression, Label::Normal] {
            let mut class: Vec<&str> = sorted.iter().filter(|s| s.1 == label).map(|s| s.0.as_str()).collect();
            class.shuffle(&mut rng);
            dealt.extend(class);
        }
        let assignment = dealt.into_iter().enumerate().map(|(i, id)| (id.to_string(), i % folds)).collect();
        Ok(FoldPlan { folds, assignment })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignment.get(subject_id).copied()
    }

    /// Subject ids in `fold`, sorted.
    pub fn members(&self, fold: usize) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.as_str()).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.folds];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cohort(n: usize, positives: usize) -> Vec<(String, Label)> {
        (0..n)
            .map(|i| (format!("S{i:04}"), if i < positives { Label::Depression } else { Label::Normal }))
            .collect()
    }

    #[test]
    fn clinical_and_small_sizes() {
        assert_eq!(FoldPlan::stratified(&cohort(200, 94), 5, 0).unwrap().sizes(), vec![40; 5]);
        assert_eq!(FoldPlan::stratified(&cohort(60, 30), 5, 0).unwrap().sizes(), vec![12; 5]);
        let sizes = FoldPlan::stratified(&cohort(23, 9), 5, 3).unwrap().sizes();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        assert!(FoldPlan::stratified(&cohort(4, 2), 5, 0).is_err());
    }

    #[test]
    fn classes_are_spread() {
        let plan = FoldPlan::stratified(&cohort(60, 30), 5, 11).unwrap();
        for f in 0..5 {
            let pos = plan.members(f).iter().filter(|id| id[1..].parse::<usize>().unwrap() < 30).count();
            assert_eq!(pos, 6);
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let mut c = cohort(37, 15);
        let a = FoldPlan::stratified(&c, 5, 9).unwrap();
        c.reverse();
        assert_eq!(FoldPlan::stratified(&c, 5, 9).unwrap(), a);
    }
}
