//! Component fusion: generative answer reranking, score aggregation over the
//! top extractive spans, and the extractive/abstractive binary decision.

pub mod optim;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use optim::{gradient_descent, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use crate::math::{dot, log_softmax, sigmoid};
use crate::reader::AnswerSpan;

/// Which of `[P_e, P_g, P_r, P_rr]` enter the aggregation model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureMask {
    pub extractive: bool,
    pub generative: bool,
    pub retriever: bool,
    pub reranker: bool,
}

impl FeatureMask {
    pub const FULL: FeatureMask = FeatureMask {
        extractive: true,
        generative: true,
        retriever: true,
        reranker: true,
    };

    pub const EXTRACTIVE_ONLY: FeatureMask = FeatureMask {
        extractive: true,
        generative: false,
        retriever: false,
        reranker: false,
    };

    fn flags(&self) -> [bool; 4] {
        [self.extractive, self.generative, self.retriever, self.reranker]
    }

    pub fn active_count(&self) -> usize {
        self.flags().iter().filter(|f| **f).count()
    }

    /// Every ablation combination: readers `{e}, {g}, {e,g}` crossed with
    /// passage scores `{}, {r}, {rr}, {r,rr}`.
    pub fn ablation_grid() -> Vec<FeatureMask> {
        let readers = [(true, false), (false, true), (true, true)];
        let passages = [(false, false), (true, false), (false, true), (true, true)];
        readers
            .iter()
            .flat_map(|&(e, g)| {
                passages.iter().map(move |&(r, rr)| FeatureMask {
                    extractive: e,
                    generative: g,
                    retriever: r,
                    reranker: rr,
                })
            })
            .collect()
    }
}

const FEATURE_NAMES: [&str; 4] = ["e", "g", "r", "rr"];

impl fmt::Display for FeatureMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self
            .flags()
            .into_iter()
            .zip(FEATURE_NAMES)
            .filter(|(on, _)| *on)
            .map(|(_, n)| n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for FeatureMask {
    type Err = Error;

    /// Comma-separated subset of `e,g,r,rr`.
    fn from_str(s: &str) -> Result<Self> {
        let mut m = FeatureMask {
            extractive: false,
            generative: false,
            retriever: false,
            reranker: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "e" => m.extractive = true,
                "g" => m.generative = true,
                "r" => m.retriever = true,
                "rr" => m.reranker = true,
                other => return Err(Error::invalid(format!("unknown fusion feature {other:?}"))),
            }
        }
        if m.active_count() == 0 {
            return Err(Error::invalid("feature mask selects nothing"));
        }
        Ok(m)
    }
}

/// `x(a) = [P_e(a), P_g(a), P_r(p_a), P_rr(p_a)]`. Components outside the
/// model's mask are ignored and may hold any value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionFeatures(pub [f64; 4]);

impl FusionFeatures {
    pub fn from_span(span: &AnswerSpan) -> FusionFeatures {
        let p = |lp: Option<f64>| lp.map_or(f64::NAN, f64::exp);
        FusionFeatures([span.logp_e.exp(), p(span.logp_g), p(span.logp_r), p(span.logp_rr)])
    }

    /// Logs of the active components.
    pub fn active_logs(&self, mask: &FeatureMask) -> Result<Vec<f64>> {
        mask.flags()
            .iter()
            .zip(self.0)
            .zip(FEATURE_NAMES)
            .filter(|((on, _), _)| **on)
            .map(|((_, x), name)| {
                if x > 0.0 && x.is_finite() {
                    Ok(x.ln())
                } else {
                    Err(Error::invalid(format!("feature {name} = {x} is not a positive probability")))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationModel {
    pub mask: FeatureMask,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl AggregationModel {
    pub fn zeros(mask: FeatureMask) -> Self {
        AggregationModel {
            mask,
            weights: vec![0.0; mask.active_count()],
            bias: 0.0,
        }
    }

    /// `w = e_1` over an extractive-only mask: scores equal `log P_e`.
    pub fn extractive_identity() -> Self {
        AggregationModel {
            mask: FeatureMask::EXTRACTIVE_ONLY,
            weights: vec![1.0],
            bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionModel {
    /// Weights over `[s_agg, s_g*]`.
    pub weights: [f64; 2],
    pub bias: f64,
}

/// Orders spans by generative log-probability (stable: equal scores keep the
/// extractive order) and records `logp_g` on each span.
pub fn answer_rerank(spans: &[AnswerSpan], gen_logp: &HashMap<String, f64>) -> Result<Vec<AnswerSpan>> {
    let mut out = Vec::with_capacity(spans.len());
    for s in spans {
        let lp = *gen_logp
            .get(&s.text)
            .ok_or_else(|| Error::MissingScore(format!("generative score for span {:?}", s.text)))?;
        let mut s = s.clone();
        s.logp_g = Some(lp);
        out.push(s);
    }
    out.sort_by(|a, b| b.logp_g.unwrap().total_cmp(&a.logp_g.unwrap()));
    Ok(out)
}

/// `w · log x(a) + b`.
pub fn aggregate_score(x: &FusionFeatures, model: &AggregationModel) -> Result<f64> {
    let logs = x.active_logs(&model.mask)?;
    if logs.len() != model.weights.len() {
        return Err(Error::DimensionMismatch {
            expected: model.weights.len(),
            got: logs.len(),
        });
    }
    Ok(dot(&model.weights, &logs) + model.bias)
}

/// Argmax of [`aggregate_score`] over the candidate set; ties keep the
/// earlier (better extractive) candidate.
pub fn best_aggregated(candidates: &[FusionFeatures], model: &AggregationModel) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate spans to aggregate".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in candidates.iter().enumerate() {
        let s = aggregate_score(x, model)?;
        if s > best.1 {
            best = (i, s);
        }
    }
    Ok(best)
}

/// One question's top-M span features and the index of the correct span.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationExample {
    pub candidates: Vec<FusionFeatures>,
    pub gt: usize,
}

struct PreparedExample {
    logs: Vec<Vec<f64>>,
    gt: usize,
}

fn prepare(dataset: &[AggregationExample], mask: &FeatureMask) -> Result<Vec<PreparedExample>> {
    dataset
        .iter()
        .map(|ex| {
            if ex.gt >= ex.candidates.len() {
                return Err(Error::invalid(format!(
                    "gt index {} outside {} candidates",
                    ex.gt,
                    ex.candidates.len()
                )));
            }
            let logs = ex
                .candidates
                .iter()
                .map(|c| c.active_logs(mask))
                .collect::<Result<_>>()?;
            Ok(PreparedExample { logs, gt: ex.gt })
        })
        .collect()
}

/// Mean negative log-likelihood of the correct span under the softmax of
/// aggregated scores, and its gradient with respect to `[w..., b]`.
pub fn aggregation_loss(
    dataset: &[AggregationExample],
    mask: &FeatureMask,
    params: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let prepared = prepare(dataset, mask)?;
    if params.len() != mask.active_count() + 1 {
        return Err(Error::DimensionMismatch {
            expected: mask.active_count() + 1,
            got: params.len(),
        });
    }
    Ok(aggregation_objective(&prepared, params))
}

fn aggregation_objective(data: &[PreparedExample], params: &[f64]) -> (f64, Vec<f64>) {
    let k = params.len() - 1;
    let (w, b) = (&params[..k], params[k]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; k + 1];
    for ex in data {
        let scores: Vec<f64> = ex.logs.iter().map(|l| dot(w, l) + b).collect();
        let logp = log_softmax(&scores);
        loss -= logp[ex.gt];
        for (i, l) in ex.logs.iter().enumerate() {
            let coeff = logp[i].exp() - if i == ex.gt { 1.0 } else { 0.0 };
            for (g, x) in grad[..k].iter_mut().zip(l) {
                *g += coeff * x;
            }
            grad[k] += coeff;
        }
    }
    let n = data.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

pub fn train_aggregation(
    dataset: &[AggregationExample],
    mask: FeatureMask,
    cfg: &TrainConfig,
) -> Result<(AggregationModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("aggregation training set".into()));
    }
    let prepared = prepare(dataset, &mask)?;
    let init = vec![0.0; mask.active_count() + 1];
    let (params, report) = gradient_descent(init, cfg, |p| aggregation_objective(&prepared, p))?;
    let k = params.len() - 1;
    Ok((
        AggregationModel {
            mask,
            weights: params[..k].to_vec(),
            bias: params[k],
        },
        report,
    ))
}

/// Binary cross-entropy on a logit: `softplus(l) - t·l`, with its derivative
/// `sigmoid(l) - t`.
pub fn bce(logit: f64, target: bool) -> (f64, f64) {
    let t = if target { 1.0 } else { 0.0 };
    let loss = logit.max(0.0) - logit * t + (-logit.abs()).exp().ln_1p();
    (loss, sigmoid(logit) - t)
}

/// Binary-decision training row. `abstractive` is the target: 1 when the
/// generated answer is the correct one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionExample {
    pub s_agg: f64,
    pub s_gen: f64,
    pub abstractive: bool,
}

/// Mean BCE over the dataset and its gradient with respect to `[w1, w2, b]`.
pub fn decision_loss(dataset: &[DecisionExample], params: &[f64]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; 3];
    for ex in dataset {
        let logit = params[0] * ex.s_agg + params[1] * ex.s_gen + params[2];
        let (l, d) = bce(logit, ex.abstractive);
        loss += l;
        grad[0] += d * ex.s_agg;
        grad[1] += d * ex.s_gen;
        grad[2] += d;
    }
    let n = dataset.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad)
}

pub fn train_binary_decision(dataset: &[DecisionExample], cfg: &TrainConfig) -> Result<(DecisionModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("binary decision training set".into()));
    }
    let (p, report) = gradient_descent(vec![0.0; 3], cfg, |p| decision_loss(dataset, p))?;
    Ok((
        DecisionModel {
            weights: [p[0], p[1]],
            bias: p[2],
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Extractive,
    Abstractive,
}

pub fn decision_probability(model: &DecisionModel, s_agg: f64, s_gen: f64) -> f64 {
    sigmoid(model.weights[0] * s_agg + model.weights[1] * s_gen + model.bias)
}

/// Abstractive when the predicted probability of target 1 is at least 0.5.
pub fn decide(model: &DecisionModel, s_agg: f64, s_gen: f64) -> Decision {
    if decision_probability(model, s_agg, s_gen) >= 0.5 {
        Decision::Abstractive
    } else {
        Decision::Extractive
    }
}

pub fn decide_answer<'a>(
    span_answer: &'a str,
    generated_answer: &'a str,
    s_agg: f64,
    s_gen: f64,
    model: &DecisionModel,
) -> &'a str {
    match decide(model, s_agg, s_gen) {
        Decision::Extractive => span_answer,
        Decision::Abstractive => generated_answer,
    }
}

/// Serialized fusion models with their training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelFile {
    Aggregation {
        mask: String,
        weights: HashMap<String, f64>,
        bias: f64,
        training: Option<TrainReport>,
    },
    Decision {
        w_agg: f64,
        w_gen: f64,
        bias: f64,
        training: Option<TrainReport>,
    },
}

impl ModelFile {
    pub fn from_aggregation(model: &AggregationModel, training: Option<TrainReport>) -> Self {
        let names = model
            .mask
            .flags()
            .into_iter()
            .zip(FEATURE_NAMES)
            .filter(|(on, _)| *on)
            .map(|(_, n)| n.to_string());
        ModelFile::Aggregation {
            mask: model.mask.to_string(),
            weights: names.zip(model.weights.iter().copied()).collect(),
            bias: model.bias,
            training,
        }
    }

    pub fn from_decision(model: &DecisionModel, training: Option<TrainReport>) -> Self {
        ModelFile::Decision {
            w_agg: model.weights[0],
            w_gen: model.weights[1],
            bias: model.bias,
            training,
        }
    }

    pub fn aggregation(&self) -> Result<AggregationModel> {
        match self {
            ModelFile::Aggregation { mask, weights, bias, .. } => {
                let mask: FeatureMask = mask.parse()?;
                let weights = mask
                    .flags()
                    .iter()
                    .zip(FEATURE_NAMES)
                    .filter(|(on, _)| **on)
                    .map(|(_, n)| {
                        weights
                            .get(n)
                            .copied()
                            .ok_or_else(|| Error::Format(format!("aggregation model lacks weight {n}")))
                    })
                    .collect::<Result<_>>()?;
                Ok(AggregationModel { mask, weights, bias: *bias })
            }
            _ => Err(Error::Format("expected an aggregation model".into())),
        }
    }

    pub fn decision(&self) -> Result<DecisionModel> {
        match self {
            ModelFile::Decision { w_agg, w_gen, bias, .. } => Ok(DecisionModel {
                weights: [*w_agg, *w_gen],
                bias: *bias,
            }),
            _ => Err(Error::Format("expected a decision model".into())),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(text: &str, logp_e: f64) -> AnswerSpan {
        AnswerSpan {
            passage_id: 0,
            start_tok: 0,
            end_tok: 0,
            text: text.into(),
            logp_e,
            logp_g: None,
            logp_r: None,
            logp_rr: None,
        }
    }

    #[test]
    fn answer_rerank_orders_by_generative() {
        let spans = vec![span("a", -1.0), span("b", -2.0), span("c", -3.0)];
        let same: HashMap<_, _> = [("a".into(), -0.1), ("b".into(), -0.2), ("c".into(), -0.3)].into();
        let texts = |v: Vec<AnswerSpan>| v.into_iter().map(|s| s.text).collect::<Vec<_>>();
        assert_eq!(texts(answer_rerank(&spans, &same).unwrap()), ["a", "b", "c"]);
        let rev: HashMap<_, _> = [("a".into(), -3.0), ("b".into(), -2.0), ("c".into(), -1.0)].into();
        let out = answer_rerank(&spans, &rev).unwrap();
        assert_eq!(out[0].logp_g, Some(-1.0));
        assert_eq!(texts(out), ["c", "b", "a"]);
        assert_eq!(texts(answer_rerank(&spans[..1], &rev).unwrap()), ["a"]);
        let partial: HashMap<_, _> = [("a".into(), -3.0)].into();
        assert!(matches!(answer_rerank(&spans, &partial), Err(Error::MissingScore(_))));
    }

    #[test]
    fn aggregate_hand_values() {
        let x = FusionFeatures([0.5, 0.25, 1.0, 1.0]);
        let model = AggregationModel {
            mask: FeatureMask::FULL,
            weights: vec![1.0, 1.0, 0.0, 0.0],
            bias: 0.0,
        };
        assert!((aggregate_score(&x, &model).unwrap() - 0.125f64.ln()).abs() < 1e-12);
        assert!((aggregate_score(&x, &model).unwrap() + 2.0794).abs() < 1e-4);
        let zero = AggregationModel::zeros(FeatureMask::FULL);
        assert_eq!(aggregate_score(&x, &zero).unwrap(), 0.0);
        let bad = FusionFeatures([0.0, 0.25, 1.0, 1.0]);
        assert!(aggregate_score(&bad, &zero).is_err());
    }

    #[test]
    fn best_aggregated_matches_enumeration() {
        let cands = [
            FusionFeatures([0.2, 0.5, 0.3, 0.3]),
            FusionFeatures([0.5, 0.1, 0.3, 0.3]),
            FusionFeatures([0.3, 0.4, 0.4, 0.2]),
        ];
        let model = AggregationModel {
            mask: FeatureMask::FULL,
            weights: vec![1.0, 0.8, 0.2, 0.5],
            bias: 0.3,
        };
        let scores: Vec<f64> = cands
            .iter()
            .map(|c| {
                1.0 * c.0[0].ln() + 0.8 * c.0[1].ln() + 0.2 * c.0[2].ln() + 0.5 * c.0[3].ln() + 0.3
            })
            .collect();
        let (arg, max) = best_aggregated(&cands, &model).unwrap();
        let expect = (0..3).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        assert_eq!(arg, expect);
        assert!((max - scores[expect]).abs() < 1e-12);

        let (e_arg, _) = best_aggregated(&cands, &AggregationModel::extractive_identity()).unwrap();
        assert_eq!(e_arg, 1);
        assert_eq!(best_aggregated(&cands[..1], &model).unwrap().0, 0);
        // ties resolved toward the earlier span
        let (tie, _) = best_aggregated(&cands, &AggregationModel::zeros(FeatureMask::FULL)).unwrap();
        assert_eq!(tie, 0);
    }

    #[test]
    fn bce_values() {
        let (l, g) = bce(0.0, true);
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, -0.5);
        assert_eq!(bce(0.0, false).1, 0.5);
        let (l, _) = bce(20.0, true);
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-24);
        assert!((l - 2.061e-9).abs() < 1e-12);
        assert!(bce(-40.0, true).0 > 39.0);
    }

    #[test]
    fn decision_sign_rules() {
        let m = DecisionModel {
            weights: [1.0, -1.0],
            bias: 0.0,
        };
        assert_eq!(decide(&m, 2.0, 1.0), Decision::Abstractive);
        assert_eq!(decide(&m, 1.0, 2.0), Decision::Extractive);
        assert_eq!(decide(&m, 1.0, 1.0), Decision::Abstractive);
        let always = DecisionModel {
            weights: [0.0, 0.0],
            bias: 10.0,
        };
        assert_eq!(decide_answer("span", "gen", -5.0, -9.0, &always), "gen");
    }

    #[test]
    fn decision_fixture_hand_thresholds() {
        let m = DecisionModel {
            weights: [0.5, 2.0],
            bias: 1.0,
        };
        // logits: 0.5*-2 + 2*-1 + 1 = -2; 0.5*-1 + 2*-0.1 + 1 = 0.3;
        //         0.5*0 + 2*-0.5 + 1 = 0; 0.5*-4 + 2*-0.2 + 1 = -1.4
        let cases = [(-2.0, -1.0, Decision::Extractive), (-1.0, -0.1, Decision::Abstractive),
                     (0.0, -0.5, Decision::Abstractive), (-4.0, -0.2, Decision::Extractive)];
        for (a, g, want) in cases {
            assert_eq!(decide(&m, a, g), want, "s_agg={a} s_gen={g}");
        }
    }

    #[test]
    fn zero_epoch_training_is_neutral() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let data = vec![DecisionExample {
            s_agg: -1.0,
            s_gen: -2.0,
            abstractive: true,
        }];
        let (m, _) = train_binary_decision(&data, &cfg).unwrap();
        assert_eq!(decision_probability(&m, 3.0, -7.0), 0.5);
        let agg = vec![AggregationExample {
            candidates: vec![FusionFeatures([0.5, 0.5, 0.5, 0.5]); 2],
            gt: 1,
        }];
        let (a, _) = train_aggregation(&agg, FeatureMask::FULL, &cfg).unwrap();
        assert!(a.weights.iter().all(|w| *w == 0.0));
        assert!(train_binary_decision(&[], &cfg).is_err());
    }

    #[test]
    fn mask_parsing_and_grid() {
        let m: FeatureMask = "e, rr".parse().unwrap();
        assert!(m.extractive && m.reranker && !m.generative && !m.retriever);
        assert_eq!(m.to_string(), "e,rr");
        assert!("x".parse::<FeatureMask>().is_err());
        assert!("".parse::<FeatureMask>().is_err());
        assert_eq!(FeatureMask::ablation_grid().len(), 12);
    }

    #[test]
    fn model_file_round_trip() {
        let m = AggregationModel {
            mask: "e,g,rr".parse().unwrap(),
            weights: vec![0.7, 0.2, 0.1],
            bias: -0.5,
        };
        let f = ModelFile::from_aggregation(&m, None);
        let back: ModelFile = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back.aggregation().unwrap(), m);
        assert!(back.decision().is_err());
    }
}
