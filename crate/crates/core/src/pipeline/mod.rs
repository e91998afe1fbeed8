//! End-to-end question answering over a bound [`ScoreProvider`]:
//! retrieve, rerank, extractive decoding, generative reranking,
//! aggregation and the binary decision.

mod cache;
mod files;
mod lexical;

pub use cache::StageCache;
pub use files::{encoder_path, FileProvider, GenerativeRecord, QueryRecord};
pub use lexical::{LexicalProvider, LEXICAL_HIDDEN_DIM};

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Passage, PassageId, PassageStore, QaExample};
use crate::error::{Error, Result, Stage, StageExt};
use crate::eval::{exact_match, EvalReport};
use crate::fusion::{
    answer_rerank, best_aggregated, decide, train_aggregation, train_binary_decision, AggregationExample,
    AggregationModel, Decision, DecisionExample, DecisionModel, FeatureMask, FusionFeatures, TrainConfig, TrainReport,
};
use crate::index::{EmbeddingMatrix, RetrievalResult};
use crate::io::fingerprint;
use crate::reader::{
    attach_text, compute_scores, decode_spans, normalize, span_log_partition, AnswerSpan, EncoderOutput,
    Factorization, ReaderHeads, DEFAULT_MAX_SPAN_LEN,
};
use crate::reranker::{apply_rerank, Candidate, CandidateList, RerankScores};

/// How the final answer is chosen. `Extractive` and `Generative` use one
/// reader alone; the others combine both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FusionMode {
    #[serde(rename = "ext", alias = "none")]
    Extractive,
    #[serde(rename = "gen")]
    Generative,
    #[serde(rename = "naive")]
    Naive,
    #[serde(rename = "aggr")]
    Aggregate,
    #[serde(rename = "aggr+bd")]
    AggregateDecision,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Extractive,
        FusionMode::Generative,
        FusionMode::Naive,
        FusionMode::Aggregate,
        FusionMode::AggregateDecision,
    ];

    pub fn uses_extractive(self) -> bool {
        self != FusionMode::Generative
    }

    pub fn uses_generative(self) -> bool {
        self != FusionMode::Extractive
    }

    /// Readers and fusion columns of the ablation table.
    pub fn table_labels(self) -> (&'static str, &'static str) {
        match self {
            FusionMode::Extractive => ("ext", "-"),
            FusionMode::Generative => ("gen", "-"),
            FusionMode::Naive => ("ext+gen", "naive"),
            FusionMode::Aggregate => ("ext+gen", "aggr"),
            FusionMode::AggregateDecision => ("ext+gen", "aggr+bd"),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Extractive => "ext",
            FusionMode::Generative => "gen",
            FusionMode::Naive => "naive",
            FusionMode::Aggregate => "aggr",
            FusionMode::AggregateDecision => "aggr+bd",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ext" | "none" => FusionMode::Extractive,
            "gen" => FusionMode::Generative,
            "naive" => FusionMode::Naive,
            "aggr" => FusionMode::Aggregate,
            "aggr+bd" => FusionMode::AggregateDecision,
            other => return Err(Error::invalid(format!("unknown fusion mode {other:?}"))),
        })
    }
}

mod factorization_str {
    use super::Factorization;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(f: &Factorization, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&f.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Factorization, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Pipeline settings, read from the `[pipeline]` table of a TOML config or
/// from a bare table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Passages retrieved per question.
    pub k: usize,
    /// Passages read by the extractive reader. Defaults to 24 with the
    /// reranker and 128 without.
    pub v: Option<usize>,
    /// Passages given to the generative reader.
    pub v2: usize,
    /// Spans kept from extractive decoding.
    pub m: usize,
    pub max_span_len: usize,
    #[serde(with = "factorization_str")]
    pub factorization: Factorization,
    pub fusion: FusionMode,
    pub reranker: bool,
    /// Feed fusion the span probability normalized over all legal spans
    /// instead of the raw factor product.
    pub normalized_pe: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k: 200,
            v: None,
            v2: 25,
            m: 10,
            max_span_len: DEFAULT_MAX_SPAN_LEN,
            factorization: Factorization::FULL,
            fusion: FusionMode::AggregateDecision,
            reranker: true,
            normalized_pe: false,
        }
    }
}

impl PipelineConfig {
    pub fn reader_passages(&self) -> usize {
        self.v.unwrap_or(if self.reranker { 24 } else { 128 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.reader_passages() == 0 || self.reader_passages() > self.k {
            return Err(Error::invalid(format!("V={} must be in 1..=K={}", self.reader_passages(), self.k)));
        }
        if self.v2 == 0 || self.v2 > self.k {
            return Err(Error::invalid(format!("V2={} must be in 1..=K={}", self.v2, self.k)));
        }
        if self.m == 0 {
            return Err(Error::invalid("M must be at least 1"));
        }
        if self.max_span_len == 0 {
            return Err(Error::invalid("max_span_len must be at least 1"));
        }
        Ok(())
    }

    /// Hash of the fields that shape stage outputs before fusion.
    pub fn stage_hash(&self) -> String {
        let mut c = self.clone();
        c.fusion = FusionMode::Extractive;
        c.v = Some(self.reader_passages());
        fingerprint(&c)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Wrapped {
            pipeline: PipelineConfig,
        }
        let value: toml::Value = toml::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        let cfg: PipelineConfig = if value.get("pipeline").is_some() {
            value
                .try_into::<Wrapped>()
                .map_err(|e| Error::Format(e.to_string()))?
                .pipeline
        } else {
            value.try_into().map_err(|e| Error::Format(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// A free-form answer and its log-probability `s_g*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedAnswer {
    pub text: String,
    pub logp: f64,
}

/// Everything neural the pipeline consumes. Implementations are shared
/// across threads and must be deterministic.
pub trait ScoreProvider: Send + Sync {
    fn query_embedding(&self, q: &QaExample) -> Result<Vec<f32>>;

    /// Unnormalized relevance scores for every candidate.
    fn rerank_scores(&self, q: &QaExample, candidates: &CandidateList) -> Result<RerankScores>;

    fn encode(&self, q: &QaExample, passage: &Passage) -> Result<EncoderOutput>;

    fn reader_heads(&self) -> Result<ReaderHeads>;

    fn generate(&self, q: &QaExample, passages: &[PassageId]) -> Result<GeneratedAnswer>;

    /// Generative log-probability of each span text given the passages.
    fn span_logprobs(&self, q: &QaExample, passages: &[PassageId], spans: &[String]) -> Result<HashMap<String, f64>>;

    /// Identifies the provider's data in cache keys.
    fn fingerprint(&self) -> String {
        String::new()
    }
}

/// Per-stage outputs for one question, before the final fusion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionCandidates {
    pub question_key: String,
    pub retrieved: Vec<RetrievalResult>,
    /// Full candidate order after reranking, when the reranker is on.
    pub reranked: Option<Vec<PassageId>>,
    pub reader_passages: Vec<PassageId>,
    /// Top-M spans in extractive order, with every available log feature.
    pub spans: Vec<AnswerSpan>,
    pub generative_passages: Vec<PassageId>,
    pub generated: Option<GeneratedAnswer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub candidates: QuestionCandidates,
    pub fusion: FusionMode,
    /// Spans in the order the fusion step ranked them.
    pub fused_order: Vec<String>,
    pub s_agg: Option<f64>,
    pub decision: Option<Decision>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub report: EvalReport,
    pub predictions: Vec<Option<String>>,
    /// `(example index, error message)` for questions that failed.
    pub errors: Vec<(usize, String)>,
}

#[derive(Clone)]
pub struct Pipeline {
    config: PipelineConfig,
    store: Arc<PassageStore>,
    index: Arc<EmbeddingMatrix>,
    provider: Arc<dyn ScoreProvider>,
    heads: Arc<ReaderHeads>,
    aggregation: Option<AggregationModel>,
    decision: Option<DecisionModel>,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        store: Arc<PassageStore>,
        index: Arc<EmbeddingMatrix>,
        provider: Arc<dyn ScoreProvider>,
    ) -> Result<Self> {
        config.validate()?;
        let heads = Arc::new(provider.reader_heads().stage(Stage::Extract)?);
        Ok(Pipeline {
            config,
            store,
            index,
            provider,
            heads,
            aggregation: None,
            decision: None,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &PassageStore {
        &self.store
    }

    pub fn with_config(&self, config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, ..self.clone() })
    }

    pub fn with_index(&self, index: Arc<EmbeddingMatrix>) -> Self {
        Pipeline { index, ..self.clone() }
    }

    pub fn with_aggregation(mut self, model: AggregationModel) -> Self {
        self.aggregation = Some(model);
        self
    }

    pub fn with_decision(mut self, model: DecisionModel) -> Self {
        self.decision = Some(model);
        self
    }

    /// Hash identifying cached stage outputs for this config and provider.
    pub fn cache_key(&self) -> String {
        fingerprint(&(
            self.config.stage_hash(),
            self.provider.fingerprint(),
            self.index.len(),
            fingerprint(&self.index.row_ids()),
        ))
    }

    /// Runs the stages the configured fusion mode needs.
    pub fn candidates(&self, q: &QaExample) -> Result<QuestionCandidates> {
        let mode = self.config.fusion;
        self.collect(q, mode.uses_extractive(), mode.uses_generative())
    }

    /// Runs every stage regardless of fusion mode. Fusion training uses this.
    pub fn full_candidates(&self, q: &QaExample) -> Result<QuestionCandidates> {
        self.collect(q, true, true)
    }

    fn collect(&self, q: &QaExample, extractive: bool, generative: bool) -> Result<QuestionCandidates> {
        let cfg = &self.config;
        let query = self.provider.query_embedding(q).stage(Stage::Retrieve)?;
        let retrieved = self.index.search(&query, cfg.k).stage(Stage::Retrieve)?;
        let cands = CandidateList::new(
            q.key(),
            retrieved
                .iter()
                .map(|r| Candidate {
                    passage_id: r.passage_id,
                    retriever_score: r.score as f64,
                })
                .collect(),
        )
        .stage(Stage::Retrieve)?;
        let p_r = cands.retriever_distribution().stage(Stage::Retrieve)?;

        let (order, p_rr) = if cfg.reranker {
            let scores = self.provider.rerank_scores(q, &cands).stage(Stage::Rerank)?;
            let ordered = apply_rerank(&cands, &scores, cands.len()).stage(Stage::Rerank)?;
            let p_rr = crate::reranker::rerank_distribution(&cands, &scores).stage(Stage::Rerank)?;
            (ordered.ids(), Some(p_rr))
        } else {
            (cands.ids(), None)
        };

        let reader_passages: Vec<PassageId> = order[..cfg.reader_passages()].to_vec();
        let spans = if extractive {
            self.extract(q, &reader_passages, &p_r, p_rr.as_ref()).stage(Stage::Extract)?
        } else {
            Vec::new()
        };

        let generative_passages: Vec<PassageId> = order[..cfg.v2].to_vec();
        let (generated, spans) = if generative {
            let g = self.provider.generate(q, &generative_passages).stage(Stage::Generate)?;
            if !g.logp.is_finite() {
                return Err(Error::invalid("generated answer has a non-finite log-probability").at_stage(Stage::Generate));
            }
            let spans = if spans.is_empty() {
                spans
            } else {
                let texts: Vec<String> = spans.iter().map(|s| s.text.clone()).collect();
                let lp = self
                    .provider
                    .span_logprobs(q, &generative_passages, &texts)
                    .stage(Stage::Generate)?;
                spans
                    .into_iter()
                    .map(|mut s| {
                        s.logp_g = Some(*lp.get(&s.text).ok_or_else(|| {
                            Error::MissingScore(format!("generative score for span {:?}", s.text)).at_stage(Stage::Generate)
                        })?);
                        Ok(s)
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            (Some(g), spans)
        } else {
            (None, spans)
        };

        Ok(QuestionCandidates {
            question_key: q.key().to_string(),
            retrieved,
            reranked: p_rr.is_some().then_some(order),
            reader_passages,
            spans,
            generative_passages,
            generated,
        })
    }

    fn extract(
        &self,
        q: &QaExample,
        passages: &[PassageId],
        p_r: &BTreeMap<PassageId, f64>,
        p_rr: Option<&BTreeMap<PassageId, f64>>,
    ) -> Result<Vec<AnswerSpan>> {
        let cfg = &self.config;
        let encoders = passages
            .iter()
            .map(|id| self.provider.encode(q, self.store.require(*id)?))
            .collect::<Result<Vec<_>>>()?;
        for (enc, id) in encoders.iter().zip(passages) {
            if enc.passage_id != *id {
                return Err(Error::invalid(format!("encoder output for passage {} returned for {id}", enc.passage_id)));
            }
        }
        let sets = encoders
            .iter()
            .map(|e| compute_scores(e, &self.heads, cfg.max_span_len))
            .collect::<Result<Vec<_>>>()?;
        let dist = normalize(&sets)?;
        let mut spans = decode_spans(&dist, cfg.factorization, cfg.m, cfg.max_span_len)?;
        attach_text(&mut spans, &encoders, &self.store)?;
        let shift = if cfg.normalized_pe {
            span_log_partition(&dist, cfg.factorization, cfg.max_span_len)?
        } else {
            0.0
        };
        for s in &mut spans {
            s.logp_e -= shift;
            s.logp_r = p_r.get(&s.passage_id).map(|p| p.ln());
            s.logp_rr = p_rr.and_then(|m| m.get(&s.passage_id)).map(|p| p.ln());
        }
        Ok(spans)
    }

    /// The final answer from collected stage outputs.
    pub fn fuse(&self, c: QuestionCandidates) -> Result<Trace> {
        let mode = self.config.fusion;
        let first_span = |c: &QuestionCandidates| {
            c.spans
                .first()
                .map(|s| s.text.clone())
                .ok_or_else(|| Error::Empty("no decoded spans".into()).at_stage(Stage::Fuse))
        };
        let generated = |c: &QuestionCandidates| {
            c.generated
                .as_ref()
                .map(|g| (g.text.clone(), g.logp))
                .ok_or_else(|| Error::MissingScore("generated answer".into()).at_stage(Stage::Fuse))
        };
        let mut s_agg = None;
        let mut decision = None;
        let (answer, fused_order) = match mode {
            FusionMode::Extractive => (first_span(&c)?, c.spans.iter().map(|s| s.text.clone()).collect()),
            FusionMode::Generative => (generated(&c)?.0, Vec::new()),
            FusionMode::Naive => {
                let lp: HashMap<String, f64> = c
                    .spans
                    .iter()
                    .filter_map(|s| s.logp_g.map(|g| (s.text.clone(), g)))
                    .collect();
                let order = answer_rerank(&c.spans, &lp).stage(Stage::Fuse)?;
                let texts: Vec<String> = order.into_iter().map(|s| s.text).collect();
                (texts.first().cloned().ok_or_else(|| Error::Empty("no decoded spans".into()).at_stage(Stage::Fuse))?, texts)
            }
            FusionMode::Aggregate | FusionMode::AggregateDecision => {
                let model = self
                    .aggregation
                    .as_ref()
                    .ok_or_else(|| Error::invalid("no aggregation model bound").at_stage(Stage::Fuse))?;
                let feats: Vec<FusionFeatures> = c.spans.iter().map(FusionFeatures::from_span).collect();
                let (best, score) = best_aggregated(&feats, model).stage(Stage::Fuse)?;
                s_agg = Some(score);
                let span_text = c.spans[best].text.clone();
                let answer = if mode == FusionMode::AggregateDecision {
                    let dm = self
                        .decision
                        .as_ref()
                        .ok_or_else(|| Error::invalid("no decision model bound").at_stage(Stage::Fuse))?;
                    let (gen_text, s_gen) = generated(&c)?;
                    let d = decide(dm, score, s_gen);
                    decision = Some(d);
                    match d {
                        Decision::Extractive => span_text,
                        Decision::Abstractive => gen_text,
                    }
                } else {
                    span_text
                };
                (answer, vec![c.spans[best].text.clone()])
            }
        };
        Ok(Trace {
            candidates: c,
            fusion: mode,
            fused_order,
            s_agg,
            decision,
            answer,
        })
    }

    pub fn run_question(&self, q: &QaExample) -> Result<Trace> {
        self.fuse(self.candidates(q)?)
    }

    /// Runs every question in parallel. Failed questions count as wrong and
    /// are listed in `errors`; the output order follows `examples`.
    pub fn run_batch(&self, examples: &[QaExample]) -> Result<BatchReport> {
        if examples.is_empty() {
            return Err(Error::Empty("no questions to run".into()));
        }
        let results: Vec<Result<Trace>> = examples.par_iter().map(|q| self.run_question(q)).collect();
        Ok(self.report(examples, results.into_iter().map(|r| r.map(|t| t.answer)).collect()))
    }

    /// Like [`Pipeline::run_batch`] but from stage outputs computed earlier.
    pub fn fuse_batch(&self, examples: &[QaExample], candidates: &[Result<QuestionCandidates>]) -> Result<BatchReport> {
        if examples.is_empty() {
            return Err(Error::Empty("no questions to run".into()));
        }
        if examples.len() != candidates.len() {
            return Err(Error::DimensionMismatch {
                expected: examples.len(),
                got: candidates.len(),
            });
        }
        let answers = candidates
            .iter()
            .map(|c| match c {
                Ok(c) => self.fuse(c.clone()).map(|t| t.answer),
                Err(e) => Err(Error::invalid(e.to_string())),
            })
            .collect();
        Ok(self.report(examples, answers))
    }

    fn report(&self, examples: &[QaExample], answers: Vec<Result<String>>) -> BatchReport {
        let mut errors = Vec::new();
        let mut predictions = Vec::with_capacity(answers.len());
        let mut bits = Vec::with_capacity(answers.len());
        for (i, (a, ex)) in answers.into_iter().zip(examples).enumerate() {
            match a {
                Ok(text) => {
                    bits.push(exact_match(&text, &ex.answers));
                    predictions.push(Some(text));
                }
                Err(e) => {
                    bits.push(false);
                    predictions.push(None);
                    errors.push((i, e.to_string()));
                }
            }
        }
        let hash = fingerprint(&(&self.config, self.provider.fingerprint()));
        BatchReport {
            report: EvalReport::from_indicators("em", bits, hash),
            predictions,
            errors,
        }
    }

    /// Full stage outputs for every question, computed in parallel.
    pub fn collect_batch(&self, examples: &[QaExample]) -> Vec<Result<QuestionCandidates>> {
        examples.par_iter().map(|q| self.full_candidates(q)).collect()
    }

    /// [`Pipeline::collect_batch`] through a stage cache: questions already
    /// stored under this pipeline's cache key are not recomputed.
    pub fn collect_batch_cached(&self, examples: &[QaExample], cache: &StageCache) -> Result<Vec<Result<QuestionCandidates>>> {
        let key = self.cache_key();
        let mut stored: HashMap<String, QuestionCandidates> = cache.load("candidates", &key)?;
        let missing: Vec<QaExample> = examples
            .iter()
            .filter(|q| !stored.contains_key(q.key()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            for (q, c) in missing.iter().zip(self.collect_batch(&missing)) {
                if let Ok(c) = c {
                    stored.insert(q.key().to_string(), c);
                }
            }
            cache.store("candidates", &key, &stored)?;
        }
        Ok(examples
            .iter()
            .map(|q| match stored.get(q.key()) {
                Some(c) => Ok(c.clone()),
                None => self.full_candidates(q),
            })
            .collect())
    }
}

/// Aggregation training row: the question's spans and the first span that
/// matches a gold answer. `None` when no span is correct.
pub fn aggregation_example(c: &QuestionCandidates, ex: &QaExample) -> Option<AggregationExample> {
    let gt = c.spans.iter().position(|s| exact_match(&s.text, &ex.answers))?;
    Some(AggregationExample {
        candidates: c.spans.iter().map(FusionFeatures::from_span).collect(),
        gt,
    })
}

/// Decision training row. Only questions where exactly one of the
/// aggregated span and the generated answer is correct are kept.
pub fn decision_example(
    c: &QuestionCandidates,
    ex: &QaExample,
    model: &AggregationModel,
) -> Result<Option<DecisionExample>> {
    let Some(g) = &c.generated else {
        return Err(Error::MissingScore("generated answer".into()));
    };
    let feats: Vec<FusionFeatures> = c.spans.iter().map(FusionFeatures::from_span).collect();
    let (best, s_agg) = best_aggregated(&feats, model)?;
    let ext_ok = exact_match(&c.spans[best].text, &ex.answers);
    let gen_ok = exact_match(&g.text, &ex.answers);
    Ok((ext_ok != gen_ok).then_some(DecisionExample {
        s_agg,
        s_gen: g.logp,
        abstractive: gen_ok,
    }))
}

/// Trained fusion models and their training reports.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModels {
    pub aggregation: AggregationModel,
    pub aggregation_report: TrainReport,
    /// Absent when no question has exactly one correct reader.
    pub decision: Option<(DecisionModel, TrainReport)>,
}

/// Fits the aggregation model on questions with a correct span among the
/// top-M, then the decision model on questions where exactly one of the
/// aggregated span and the generated answer is right.
pub fn train_fusion(
    examples: &[QaExample],
    candidates: &[Result<QuestionCandidates>],
    mask: FeatureMask,
    cfg: &TrainConfig,
) -> Result<FusionModels> {
    if examples.len() != candidates.len() {
        return Err(Error::DimensionMismatch {
            expected: examples.len(),
            got: candidates.len(),
        });
    }
    let ok: Vec<(&QaExample, &QuestionCandidates)> = examples
        .iter()
        .zip(candidates)
        .filter_map(|(ex, c)| c.as_ref().ok().map(|c| (ex, c)))
        .collect();
    let aggr_data: Vec<AggregationExample> = ok.iter().filter_map(|(ex, c)| aggregation_example(c, ex)).collect();
    let (aggregation, aggregation_report) = train_aggregation(&aggr_data, mask, cfg)?;
    let mut bd_data = Vec::new();
    for (ex, c) in &ok {
        if let Some(row) = decision_example(c, ex, &aggregation)? {
            bd_data.push(row);
        }
    }
    let decision = if bd_data.is_empty() {
        None
    } else {
        Some(train_binary_decision(&bd_data, cfg)?)
    };
    Ok(FusionModels {
        aggregation,
        aggregation_report,
        decision,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = PipelineConfig::default();
        assert_eq!((c.k, c.reader_passages(), c.v2, c.m), (200, 24, 25, 10));
        let no_rr = PipelineConfig {
            reranker: false,
            ..c.clone()
        };
        assert_eq!(no_rr.reader_passages(), 128);
        assert!(PipelineConfig { v: Some(300), ..c.clone() }.validate().is_err());
        assert!(PipelineConfig { m: 0, ..c.clone() }.validate().is_err());
        assert_ne!(c.stage_hash(), no_rr.stage_hash());
        assert_eq!(
            c.stage_hash(),
            PipelineConfig {
                fusion: FusionMode::Naive,
                ..c.clone()
            }
            .stage_hash()
        );
    }

    #[test]
    fn config_from_toml() {
        let c = PipelineConfig::from_toml_str("[pipeline]\nk = 20\nv = 5\nv2 = 5\nfusion = \"aggr+bd\"\nfactorization = \"IC\"\n").unwrap();
        assert_eq!((c.k, c.reader_passages()), (20, 5));
        assert_eq!(c.fusion, FusionMode::AggregateDecision);
        assert!(!c.factorization.joint);
        let bare = PipelineConfig::from_toml_str("fusion = \"none\"").unwrap();
        assert_eq!(bare.fusion, FusionMode::Extractive);
        assert!(PipelineConfig::from_toml_str("kk = 1").is_err());
        assert!(PipelineConfig::from_toml_str("k = 5\nv2 = 6").is_err());
    }

    #[test]
    fn fusion_mode_names() {
        for m in FusionMode::ALL {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
    }
}
