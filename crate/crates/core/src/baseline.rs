//! Bag-of-words classifier over `text_a` only, used as a control: it cannot
//! see which aspect is asked about.

use std::collections::HashMap;

use crate::data::{tokenize, PairExample};
use crate::pooling::argmax;

/// Multinomial naive Bayes with add-one smoothing on `text_a` unigrams.
#[derive(Debug, Clone)]
pub struct UnigramBaseline {
    classes: usize,
    log_prior: Vec<f64>,
    counts: Vec<HashMap<String, f64>>,
    totals: Vec<f64>,
    vocab_size: usize,
}

impl UnigramBaseline {
    pub fn fit(examples: &[PairExample], classes: usize) -> Self {
        let mut counts = vec![HashMap::new(); classes];
        let mut totals = vec![0.0; classes];
        let mut docs = vec![0.0; classes];
        let mut vocab = std::collections::HashSet::new();
        for e in examples {
            docs[e.label] += 1.0;
            for t in tokenize(&e.text_a) {
                *counts[e.label].entry(t.clone()).or_insert(0.0) += 1.0;
                totals[e.label] += 1.0;
                vocab.insert(t);
            }
        }
        let n = examples.len() as f64;
        let log_prior = docs
            .iter()
            .map(|&d| ((d + 1.0) / (n + classes as f64)).ln())
            .collect();
        Self {
            classes,
            log_prior,
            counts,
            totals,
            vocab_size: vocab.len(),
        }
    }

    pub fn predict(&self, text_a: &str) -> usize {
        let tokens = tokenize(text_a);
        let v = self.vocab_size as f64 + 1.0;
        let scores: Vec<f64> = (0..self.classes)
            .map(|c| {
                self.log_prior[c]
                    + tokens
                        .iter()
                        .map(|t| {
                            let k = self.counts[c].get(t).copied().unwrap_or(0.0);
                            ((k + 1.0) / (self.totals[c] + v)).ln()
                        })
                        .sum::<f64>()
            })
            .collect();
        argmax(&scores)
    }

    pub fn accuracy(&self, examples: &[PairExample]) -> f64 {
        if examples.is_empty() {
            return 0.0;
        }
        let hits = examples
            .iter()
            .filter(|e| self.predict(&e.text_a) == e.label)
            .count();
        hits as f64 / examples.len() as f64
    }
}
