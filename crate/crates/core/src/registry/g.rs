//! Validation metrics used to rank candidate self-teachers.

use std::collections::HashMap;
use std::hash::Hash;

use super::GKind;
use crate::error::{Error, Result};
use crate::prob::ProbDist;
use crate::scalar::safe_ln;

/// Predictive distributions for one validation example, one per output
/// position, with the reference class at each position.
#[derive(Debug, Clone, PartialEq)]
pub struct SequencePrediction {
    pub probs: Vec<ProbDist<f64>>,
    pub targets: Vec<usize>,
}

impl SequencePrediction {
    /// Greedy (argmax) output at every position.
    pub fn greedy(&self) -> Vec<usize> {
        self.probs.iter().map(|p| p.argmax().0).collect()
    }
}

/// Token accuracy, mean NLL in nats, or corpus mini-BLEU over greedy outputs.
pub fn evaluate_g(predictions: &[SequencePrediction], g_kind: GKind) -> Result<f64> {
    let positions: usize = predictions.iter().map(|p| p.targets.len()).sum();
    if positions == 0 {
        return Err(Error::invalid("validation set is empty"));
    }
    for (i, p) in predictions.iter().enumerate() {
        if p.probs.len() != p.targets.len() {
            return Err(Error::invalid(format!(
                "example {i}: {} distributions for {} targets",
                p.probs.len(),
                p.targets.len()
            )));
        }
    }
    match g_kind {
        GKind::Accuracy => {
            let correct: usize = predictions
                .iter()
                .flat_map(|p| p.probs.iter().zip(&p.targets))
                .filter(|(d, &t)| d.argmax().0 == t)
                .count();
            Ok(correct as f64 / positions as f64)
        }
        GKind::Nll => {
            let mut total = 0.0;
            for (d, &t) in predictions.iter().flat_map(|p| p.probs.iter().zip(&p.targets)) {
                if t >= d.len() {
                    return Err(Error::invalid(format!("target {t} out of range")));
                }
                total -= safe_ln(d.get(t));
            }
            Ok(total / positions as f64)
        }
        GKind::MiniBleu => {
            let hyps: Vec<Vec<usize>> = predictions.iter().map(SequencePrediction::greedy).collect();
            let refs: Vec<Vec<usize>> = predictions.iter().map(|p| p.targets.clone()).collect();
            mini_bleu(&hyps, &refs, 4)
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU: geometric mean of clipped n-gram precisions for
/// `n = 1..=max_n`, times the brevity penalty `exp(1 - r/c)` when the total
/// hypothesis length `c` is below the reference length `r`.
///
/// An order for which neither hypotheses nor references contain any n-gram is
/// left out of the mean; an order with hypothesis n-grams but no match makes
/// the score zero.
pub fn mini_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("mini-BLEU needs at least one sentence"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::invalid("max n-gram order must be positive"));
    }
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let (mut matched, mut total, mut ref_total) = (0usize, 0usize, 0usize);
        for (h, r) in hypotheses.iter().zip(references) {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            total += hc.values().sum::<usize>();
            ref_total += rc.values().sum::<usize>();
            matched += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
        if total == 0 && ref_total == 0 {
            continue;
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c >= r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    Ok(bp * (log_sum / orders as f64).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    fn one_hot_prediction(classes: usize, outputs: &[usize], targets: &[usize]) -> SequencePrediction {
        SequencePrediction {
            probs: outputs.iter().map(|&o| ProbDist::one_hot(classes, o).unwrap()).collect(),
            targets: targets.to_vec(),
        }
    }

    #[test]
    fn bleu_hand_counted_bigram_case() {
        // p1 = 3/4, p2 = 2/3, equal lengths
        let b = mini_bleu(&[words("a b c d")], &[words("a b c e")], 2).unwrap();
        assert!((b - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bleu_identity_is_one() {
        let refs = vec![words("the cat sat on the mat"), words("a b"), words("x")];
        assert_eq!(mini_bleu(&refs, &refs, 4).unwrap(), 1.0);
    }

    #[test]
    fn bleu_brevity_penalty_and_clipping() {
        let b = mini_bleu(&[words("a b")], &[words("a b c d")], 1).unwrap();
        assert!((b - (1.0f64 - 2.0).exp()).abs() < 1e-12);
        // "the the the" against "the cat": clipped unigram precision 1/3
        let b = mini_bleu(&[words("the the the")], &[words("the cat")], 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mini_bleu(&[words("q r")], &[words("a b")], 2).unwrap(), 0.0);
    }

    #[test]
    fn bleu_input_errors() {
        assert!(mini_bleu::<usize>(&[], &[], 4).is_err());
        assert!(mini_bleu(&[vec![1]], &[vec![1], vec![2]], 4).is_err());
        assert!(mini_bleu(&[vec![1]], &[vec![1]], 0).is_err());
    }

    #[test]
    fn accuracy_and_nll() {
        let preds = vec![
            one_hot_prediction(3, &[0, 1, 2], &[0, 1, 2]),
            one_hot_prediction(3, &[2], &[2]),
        ];
        assert_eq!(evaluate_g(&preds, GKind::Accuracy).unwrap(), 1.0);
        assert_eq!(evaluate_g(&preds, GKind::MiniBleu).unwrap(), 1.0);
        assert!(evaluate_g(&preds, GKind::Nll).unwrap().abs() < 1e-12);

        let half = SequencePrediction {
            probs: vec![ProbDist::new(vec![0.5, 0.5]).unwrap(); 2],
            targets: vec![0, 1],
        };
        assert!((evaluate_g(&[half], GKind::Nll).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_validation_set_is_rejected() {
        assert!(evaluate_g(&[], GKind::Accuracy).is_err());
        let empty = SequencePrediction { probs: vec![], targets: vec![] };
        assert!(evaluate_g(&[empty], GKind::Nll).is_err());
    }
}
