mod common;

use std::sync::Arc;

use r2d2::io::write_jsonl;
use r2d2::pipeline::{encoder_path, FileProvider, FusionMode, GenerativeRecord, Pipeline, PipelineConfig, QueryRecord, StageCache};

use r2d2::pipeline::ScoreProvider;

use common::*;

#[test]
fn lexical_pipeline_answers_planted_questions() {
    let toy = planted_corpus(30, 3, |_| false, |_| true);
    let p = lexical_pipeline(&toy, toy_config(FusionMode::Extractive));
    let r = p.run_batch(&toy.examples).unwrap();
    assert!(r.errors.is_empty());
    assert_eq!(r.report.value, 1.0);
    let t = p.run_question(&toy.examples[4]).unwrap();
    assert_eq!(t.answer, toy.examples[4].answers[0]);
    assert_eq!(t.candidates.retrieved[0].passage_id, 4);
    assert_eq!(t.candidates.reader_passages.len(), 4);
    assert!(t.candidates.spans.len() <= 5);
}

#[test]
fn generative_and_naive_modes_run() {
    let toy = planted_corpus(20, 11, |_| false, |_| true);
    for mode in [FusionMode::Generative, FusionMode::Naive] {
        let p = lexical_pipeline(&toy, toy_config(mode));
        let r = p.run_batch(&toy.examples).unwrap();
        assert!(r.errors.is_empty(), "{mode}: {:?}", r.errors);
        assert!(r.report.value > 0.5, "{mode}: {}", r.report.value);
    }
}

#[test]
fn fusion_without_models_is_an_error() {
    let toy = planted_corpus(12, 1, |_| false, |_| true);
    let p = lexical_pipeline(&toy, toy_config(FusionMode::AggregateDecision));
    assert!(p.run_question(&toy.examples[0]).is_err());
}

#[test]
fn stage_cache_reuses_candidates() {
    let toy = planted_corpus(15, 5, |_| false, |_| true);
    let p = lexical_pipeline(&toy, toy_config(FusionMode::Extractive));
    let dir = tempfile::tempdir().unwrap();
    let cache = StageCache::new(dir.path()).unwrap();
    let first = p.collect_batch_cached(&toy.examples, &cache).unwrap();
    let path = cache.path("candidates", &p.cache_key());
    assert!(path.exists());
    let bytes = std::fs::read(&path).unwrap();
    let second = p.collect_batch_cached(&toy.examples, &cache).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    let a: Vec<_> = first.into_iter().map(|c| c.unwrap()).collect();
    let b: Vec<_> = second.into_iter().map(|c| c.unwrap()).collect();
    assert_eq!(a, b);

    let other = p.with_config(PipelineConfig { m: 3, ..toy_config(FusionMode::Extractive) }).unwrap();
    assert_ne!(other.cache_key(), p.cache_key());
}

#[test]
fn file_provider_reproduces_lexical_scores() {
    let toy = planted_corpus(12, 9, |_| false, |_| true);
    let store = toy.store();
    let lex = r2d2::pipeline::LexicalProvider::new(store.clone()).unwrap();
    let index = Arc::new(lex.build_index().unwrap());
    let dir = tempfile::tempdir().unwrap();

    let queries: Vec<QueryRecord> = toy
        .examples
        .iter()
        .map(|q| QueryRecord {
            question_key: q.key().to_string(),
            embedding: lex.query_embedding(q).unwrap(),
        })
        .collect();
    write_jsonl(dir.path().join("queries.jsonl"), &queries).unwrap();
    lex.reader_heads().unwrap().save(dir.path().join("heads.json")).unwrap();
    let mut generative = Vec::new();
    let mut rerank = Vec::new();
    for q in &toy.examples {
        let cands = lex_candidates(&lex, &index, q);
        let scores = lex.rerank_scores(q, &cands).unwrap();
        rerank.push(serde_json::json!({
            "question_key": q.key(),
            "scores": scores.iter().map(|(k, v)| (k.to_string(), *v)).collect::<std::collections::BTreeMap<_, _>>(),
        }));
        for p in store.iter() {
            let enc = lex.encode(q, p).unwrap();
            let path = encoder_path(dir.path(), q.key(), p.id);
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            enc.write(&path).unwrap();
        }
        generative.push(GenerativeRecord {
            question_key: q.key().to_string(),
            answer: q.answers[0].clone(),
            logp: -0.1,
            span_logprobs: Default::default(),
        });
    }
    write_jsonl(dir.path().join("rerank.jsonl"), &rerank).unwrap();
    write_jsonl(dir.path().join("generative.jsonl"), &generative).unwrap();

    let cfg = toy_config(FusionMode::Extractive);
    let from_files = Pipeline::new(cfg.clone(), store.clone(), index.clone(), Arc::new(FileProvider::open(dir.path()).unwrap())).unwrap();
    let direct = Pipeline::new(cfg, store, index, Arc::new(lex)).unwrap();
    for q in &toy.examples {
        let a = from_files.run_question(q).unwrap();
        let b = direct.run_question(q).unwrap();
        assert_eq!(a.answer, b.answer);
        assert_eq!(a.candidates.reader_passages, b.candidates.reader_passages);
    }
    let gen = from_files.with_config(toy_config(FusionMode::Generative)).unwrap();
    assert_eq!(gen.run_batch(&toy.examples).unwrap().report.value, 1.0);
}

fn lex_candidates(
    lex: &r2d2::pipeline::LexicalProvider,
    index: &r2d2::index::EmbeddingMatrix,
    q: &r2d2::corpus::QaExample,
) -> r2d2::reranker::CandidateList {
    let hits = index.search(&lex.query_embedding(q).unwrap(), index.len()).unwrap();
    r2d2::reranker::CandidateList::new(
        q.key(),
        hits.iter()
            .map(|h| r2d2::reranker::Candidate {
                passage_id: h.passage_id,
                retriever_score: h.score as f64,
            })
            .collect(),
    )
    .unwrap()
}
