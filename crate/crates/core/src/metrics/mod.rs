//! Reference-based caption metrics, repetition, retrieval, and evaluation
//! reports.

mod bleu;
mod cider;
mod evaluate;
mod ngrams;
mod report;
mod retrieval;
mod rep;
mod rouge;

pub use bleu::{bleu4, corpus_bleu4, BLEU_MAX_N};
pub use cider::{cider_d, corpus_cider, DocumentFrequencies, CIDER_MAX_N, CIDER_SIGMA};
pub use evaluate::{evaluate_checkpoint, EvalOptions, Scorers};
pub use ngrams::ngram_counts;
pub use report::{
    format_csv, format_table, EvalReport, MetricValues, CaptionSample, COLUMNS,
    REPORT_SCHEMA_VERSION,
};
pub use rep::{rep_n, repeated_ngrams};
pub use retrieval::{rank_of, retrieval_eval, RetrievalScores};
pub use rouge::{lcs_len, rouge_l, ROUGE_BETA};
