//! Order-effect statistic, perplexity and Self-BLEU.

use std::collections::HashMap;

use crate::data::TokenId;

/// Probability floor applied to gold tokens before taking logs.
pub const PPL_EPSILON: f64 = 1e-12;

/// `max − min` of the per-position means.
pub fn max_min_gap(values: &[f64]) -> Option<f64> {
    let max = values.iter().copied().reduce(f64::max)?;
    let min = values.iter().copied().reduce(f64::min)?;
    Some(max - min)
}

/// Perplexity from natural-log token probabilities, plus how many of them
/// fell below [`PPL_EPSILON`] and were clamped.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Perplexity {
    pub value: f64,
    pub n_tokens: usize,
    pub clamped: usize,
}

pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Option<Perplexity> {
    if log_probs.is_empty() {
        return None;
    }
    let floor = PPL_EPSILON.ln();
    let mut clamped = 0;
    let mut nll = 0.0;
    for &lp in log_probs {
        let lp = if lp.is_nan() || lp < floor {
            clamped += 1;
            floor
        } else {
            lp
        };
        nll -= lp;
    }
    Some(Perplexity {
        value: (nll / log_probs.len() as f64).exp(),
        n_tokens: log_probs.len(),
        clamped,
    })
}

/// Self-BLEU and the highest n-gram order that was actually usable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelfBleu {
    pub score: f64,
    pub orders: usize,
}

type Counts = HashMap<Vec<TokenId>, usize>;

fn ngram_counts(s: &[TokenId], n: usize) -> Counts {
    let mut c = Counts::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *c.entry(w.to_vec()).or_default() += 1;
        }
    }
    c
}

/// Mean over responses of BLEU(response | all other responses).
///
/// Unigram precision is unsmoothed and a zero there scores the sentence 0.
/// Higher orders use add-one smoothing. When every response is shorter
/// than `max_n`, the orders are capped at the longest response length.
pub fn self_bleu(responses: &[Vec<TokenId>], max_n: usize) -> Option<SelfBleu> {
    if responses.len() < 2 || max_n == 0 {
        return None;
    }
    let longest = responses.iter().map(Vec::len).max().unwrap_or(0);
    let orders = max_n.min(longest);
    if orders == 0 {
        return Some(SelfBleu { score: 0.0, orders: 0 });
    }
    let counts: Vec<Vec<Counts>> = responses
        .iter()
        .map(|r| (1..=orders).map(|n| ngram_counts(r, n)).collect())
        .collect();

    let mut total = 0.0;
    for (i, hyp) in responses.iter().enumerate() {
        if hyp.is_empty() {
            continue;
        }
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=orders {
            let hc = &counts[i][n - 1];
            let possible: usize = hc.values().sum();
            let matched: usize = hc
                .iter()
                .map(|(g, &c)| {
                    let best = counts
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, rc)| rc[n - 1].get(g).copied().unwrap_or(0))
                        .max()
                        .unwrap_or(0);
                    c.min(best)
                })
                .sum();
            let p = if n == 1 {
                matched as f64 / possible as f64
            } else {
                (matched + 1) as f64 / (possible + 1) as f64
            };
            if p == 0.0 {
                zero = true;
                break;
            }
            log_sum += p.ln();
        }
        if zero {
            continue;
        }
        let c = hyp.len();
        let r = responses
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, r)| r.len())
            .min_by_key(|&l| (l.abs_diff(c), l))
            .expect("at least one reference");
        let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
        total += bp * (log_sum / orders as f64).exp();
    }
    Some(SelfBleu {
        score: total / responses.len() as f64,
        orders,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gap_examples() {
        let g = max_min_gap(&[0.20, 0.18, 0.22, 0.25]).unwrap();
        assert!((g - 0.07).abs() < 1e-12);
        assert_eq!(max_min_gap(&[0.3; 5]), Some(0.0));
        assert_eq!(max_min_gap(&[]), None);
    }

    #[test]
    fn perplexity_closed_forms() {
        let uniform = vec![(0.01f64).ln(); 7];
        assert!((perplexity_from_log_probs(&uniform).unwrap().value - 100.0).abs() < 1e-9);
        let two = [0.5f64.ln(), 0.125f64.ln()];
        assert!((perplexity_from_log_probs(&two).unwrap().value - 4.0).abs() < 1e-9);
        assert!(perplexity_from_log_probs(&[0.0, 0.0]).unwrap().value <= 1.0 + 1e-6);
        let p = perplexity_from_log_probs(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(p.clamped, 1);
        assert!(p.value.is_finite());
    }

    #[test]
    fn self_bleu_extremes() {
        let same = vec![vec![1, 2, 3, 4, 5]; 4];
        assert!((self_bleu(&same, 4).unwrap().score - 1.0).abs() < 1e-9);
        let disjoint = vec![vec![1, 2, 3, 4], vec![5, 6, 7, 8], vec![9, 10, 11, 12]];
        assert_eq!(self_bleu(&disjoint, 4).unwrap().score, 0.0);
        assert!(self_bleu(&[vec![1]], 4).is_none());
    }

    #[test]
    fn self_bleu_short_responses_fall_back() {
        let r = self_bleu(&[vec![1, 2], vec![1, 2]], 4).unwrap();
        assert_eq!(r.orders, 2);
        assert!((r.score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }
}
