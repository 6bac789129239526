//! Corpus-level BLEU over whitespace-tokenized lines.

use std::collections::HashMap;


#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("hypothesis corpus has {hyp} lines but references have {refs}")]
    LineCountMismatch { hyp: usize, refs: usize },
}

/// Corpus BLEU with per-order modified precisions. `bleu` is on the
/// 0-100 scale and is exactly 0 whenever any precision is 0 (no
/// smoothing) and exactly 100 on a perfect match.
#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
    pub warning: Option<String>,
}

impl BleuReport {
    pub fn tsv_header() -> &'static str {
        "bleu\tp1\tp2\tp3\tp4\tbp\thyp_tokens\tref_tokens"
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_tokens,
            self.ref_tokens
        )
    }
}

impl std::fmt::Display for BleuReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "BLEU = {:.2} ({:.1}/{:.1}/{:.1}/{:.1}, BP {:.3}, hyp {}, ref {})",
            self.bleu,
            self.precisions[0] * 100.0,
            self.precisions[1] * 100.0,
            self.precisions[2] * 100.0,
            self.precisions[3] * 100.0,
            self.brevity_penalty,
            self.hyp_tokens,
            self.ref_tokens
        )
    }
}

fn ngram_counts<'t, 'a>(tokens: &'t [&'a str], n: usize) -> HashMap<&'t [&'a str], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for i in 0..=tokens.len() - n {
            *counts.entry(&tokens[i..i + n]).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU up to 4-grams: clipped n-gram matches and candidate
/// n-gram totals accumulate over all lines before any division, and the
/// brevity penalty min(1, exp(1 - ref/hyp)) uses corpus token totals.
/// A hypothesis corpus with no tokens at all scores 0 with a warning
/// instead of dividing by zero.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(
    hypotheses: &[H],
    references: &[R],
) -> Result<BleuReport, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::LineCountMismatch {
            hyp: hypotheses.len(),
            refs: references.len(),
        });
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut hyp_tokens = 0usize;
    let mut ref_tokens = 0usize;

    for (h, r) in hypotheses.iter().zip(references) {
        let hyp: Vec<&str> = h.as_ref().split_whitespace().collect();
        let refr: Vec<&str> = r.as_ref().split_whitespace().collect();
        hyp_tokens += hyp.len();
        ref_tokens += refr.len();
        for n in 1..=4 {
            let ref_counts = ngram_counts(&refr, n);
            for (gram, count) in ngram_counts(&hyp, n) {
                matched[n - 1] += count.min(*ref_counts.get(gram).unwrap_or(&0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }

    if hyp_tokens == 0 {
        return Ok(BleuReport {
            bleu: 0.0,
            precisions: [0.0; 4],
            brevity_penalty: 0.0,
            hyp_tokens,
            ref_tokens,
            warning: Some("hypothesis corpus is empty; score defined as 0".into()),
        });
    }

    // An order with no candidate n-grams anywhere (all lines shorter
    // than n) is vacuous and scores 1; a genuine 0-of-N stays 0 and
    // zeroes the whole score below.
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] > 0 {
            matched[n] as f64 / total[n] as f64
        } else {
            1.0
        };
    }
    let brevity_penalty = f64::min(1.0, (1.0 - ref_tokens as f64 / hyp_tokens as f64).exp());
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
        brevity_penalty * mean_log.exp() * 100.0
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_tokens,
        ref_tokens,
        warning: None,
    })
}
