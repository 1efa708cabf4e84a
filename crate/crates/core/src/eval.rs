//! Downstream protocols: zero-shot prompt classification, image-to-report
//! retrieval and linear probing of frozen high-level features.

use imitate_autodiff::{Graph, Tensor};
use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::encoders::{TextEncoder, VisionEncoder};
use crate::error::{Error, Result};
use crate::image::{self, Image};
use crate::model::Model;
use crate::objective::Projector;
use crate::params::ParamStore;
use crate::rng;
use crate::synth::{Corpus, Split};

/// Area under the ROC curve via the Mann-Whitney statistic, ties counted
/// as one half. `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks over tied runs
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            if labels[o] {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 and accuracy of `score > threshold`.
pub fn f1_acc(scores: &[f64], labels: &[bool], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut fneg, mut correct) = (0.0, 0.0, 0.0, 0.0);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s > threshold;
        match (pred, l) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            _ => {}
        }
        if pred == l {
            correct += 1.0;
        }
    }
    let f1 = if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) };
    (f1, correct / scores.len().max(1) as f64)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// High-level features z_v,h of `images`, computed in chunks.
pub fn high_level_features(vision: &VisionEncoder, params: &ParamStore, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut g = Graph::new();
        let p = params.bind(&mut g, false);
        let x = g.constant(image::stack(chunk)?);
        let pyr = vision.forward(&mut g, &p, x)?;
        let v = g.value(pyr.high_level);
        out.extend((0..chunk.len()).map(|i| v.row(i).to_vec()));
    }
    Ok(out)
}

/// Length-normalised projections of `rows` through `proj`.
pub fn project(proj: &Projector, params: &ParamStore, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(Tensor::from_rows(rows)?);
    let y = proj.forward(&mut g, &p, x)?;
    let v = g.value(y);
    Ok((0..rows.len())
        .map(|i| {
            let mut r = v.row(i).to_vec();
            normalize(&mut r);
            r
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub name: String,
    pub auc: Option<f64>,
    pub f1: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub conditions: Vec<ConditionScore>,
    /// Mean over conditions with a defined AUC.
    pub macro_auc: Option<f64>,
    pub macro_f1: f64,
    pub macro_acc: f64,
}

/// Scores `score[i][k]` against `labels[i][k]` per condition.
pub fn zero_shot_metrics(names: &[&str], scores: &[Vec<f64>], labels: &[Vec<bool>]) -> ZeroShotReport {
    let mut conditions = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[k]).collect();
        let auc = auc(&s, &l);
        if auc.is_none() {
            warn!("condition `{name}` has a single class in the test split; AUC undefined");
        }
        let (f1, acc) = f1_acc(&s, &l, 0.0);
        conditions.push(ConditionScore {
            name: name.to_string(),
            auc,
            f1,
            acc,
        });
    }
    let defined: Vec<f64> = conditions.iter().filter_map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let n = conditions.len().max(1) as f64;
    ZeroShotReport {
        macro_f1: conditions.iter().map(|c| c.f1).sum::<f64>() / n,
        macro_acc: conditions.iter().map(|c| c.acc).sum::<f64>() / n,
        conditions,
        macro_auc,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub ks: Vec<usize>,
    pub precision: Vec<f64>,
    /// Expected precision of a random ranking.
    pub chance: f64,
    pub queries: usize,
}

/// Precision@K of ranking `candidates` by dot product with each query.
/// Ties keep candidate order.
pub fn precision_at_k(
    queries: &[Vec<f64>],
    query_cats: &[usize],
    candidates: &[Vec<f64>],
    cand_cats: &[usize],
    ks: &[usize],
) -> Result<RetrievalReport> {
    for &k in ks {
        if k == 0 || k > candidates.len() {
            return Err(Error::RetrievalK {
                k,
                candidates: candidates.len(),
            });
        }
    }
    let mut sums = vec![0.0; ks.len()];
    let mut chance = 0.0;
    for (q, &cat) in queries.iter().zip(query_cats) {
        let sims: Vec<f64> = candidates.iter().map(|c| dot(q, c)).collect();
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]));
        for (slot, &k) in ks.iter().enumerate() {
            let hits = order[..k].iter().filter(|&&i| cand_cats[i] == cat).count();
            sums[slot] += hits as f64 / k as f64;
        }
        chance += cand_cats.iter().filter(|&&c| c == cat).count() as f64 / candidates.len() as f64;
    }
    let n = queries.len().max(1) as f64;
    Ok(RetrievalReport {
        ks: ks.to_vec(),
        precision: sums.into_iter().map(|s| s / n).collect(),
        chance: chance / n,
        queries: queries.len(),
    })
}

/// Logistic regression by full-batch gradient descent with step `1/L`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logistic {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Logistic {
    pub fn fit(x: &[Vec<f64>], y: &[bool], tol: f64, max_iter: usize) -> Self {
        let n = x.len() as f64;
        let d = x[0].len();
        // L ≤ (1/4)·(‖X‖²_F + n)/n bounds the Hessian of the mean log-loss
        let frob: f64 = x.iter().flat_map(|r| r.iter()).map(|v| v * v).sum();
        let lr = 1.0 / (0.25 * (frob + n) / n);
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        let mut gw = vec![0.0; d];
        let mut iterations = 0;
        for it in 0..max_iter {
            gw.iter_mut().for_each(|g| *g = 0.0);
            let mut gb = 0.0;
            for (row, &label) in x.iter().zip(y) {
                let r = sigmoid(dot(row, &w) + b) - if label { 1.0 } else { 0.0 };
                for (g, v) in gw.iter_mut().zip(row) {
                    *g += r * v;
                }
                gb += r;
            }
            gw.iter_mut().for_each(|g| *g /= n);
            gb /= n;
            iterations = it + 1;
            let norm = (gw.iter().map(|g| g * g).sum::<f64>() + gb * gb).sqrt();
            if norm < tol {
                break;
            }
            w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= lr * g);
            b -= lr * gb;
        }
        Self {
            weights: w,
            bias: b,
            iterations,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        dot(x, &self.weights) + self.bias
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub fraction: f64,
    pub train_records: usize,
    pub macro_auc: Option<f64>,
    pub per_condition: Vec<Option<f64>>,
}

/// Standardises with training statistics, fits one classifier per
/// condition and reports test AUCs.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &[Vec<bool>],
    test_x: &[Vec<f64>],
    test_y: &[Vec<bool>],
    fraction: f64,
) -> ProbeReport {
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = train_x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let scale = |rows: &[Vec<f64>]| -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]).collect())
            .collect()
    };
    let (xs, ts) = (scale(train_x), scale(test_x));
    let k = train_y[0].len();
    let mut per_condition = Vec::with_capacity(k);
    for c in 0..k {
        let y: Vec<bool> = train_y.iter().map(|r| r[c]).collect();
        if y.iter().all(|&v| v) || y.iter().all(|&v| !v) {
            warn!("linear probe at fraction {fraction}: condition {c} has one class; excluded");
            per_condition.push(None);
            continue;
        }
        let model = Logistic::fit(&xs, &y, 1e-6, 5000);
        let scores: Vec<f64> = ts.iter().map(|r| model.score(r)).collect();
        let labels: Vec<bool> = test_y.iter().map(|r| r[c]).collect();
        per_condition.push(auc(&scores, &labels));
    }
    let defined: Vec<f64> = per_condition.iter().flatten().copied().collect();
    ProbeReport {
        fraction,
        train_records: train_x.len(),
        macro_auc: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        per_condition,
    }
}

/// Which protocols to run.
#[derive(Clone, Debug, PartialEq)]
pub struct Tasks {
    pub zero_shot: bool,
    pub retrieval: bool,
    pub probe_fractions: Vec<f64>,
}

impl Default for Tasks {
    fn default() -> Self {
        Self {
            zero_shot: true,
            retrieval: true,
            probe_fractions: vec![0.01, 0.1, 1.0],
        }
    }
}

impl Tasks {
    pub const NAMES: [&'static str; 3] = ["zeroshot", "retrieval", "probe"];

    /// Selects protocols by name; `probe` runs every probe fraction.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut t = Self {
            zero_shot: false,
            retrieval: false,
            probe_fractions: Vec::new(),
        };
        for n in names {
            match n.as_ref() {
                "zeroshot" => t.zero_shot = true,
                "retrieval" => t.retrieval = true,
                "probe" => t.probe_fractions = Tasks::default().probe_fractions,
                other => {
                    return Err(Error::Config(format!(
                        "unknown task `{other}` (valid: {})",
                        Self::NAMES.join(", ")
                    )))
                }
            }
        }
        Ok(t)
    }
}

pub const RETRIEVAL_KS: [usize; 3] = [5, 10, 100];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub zero_shot: Option<ZeroShotReport>,
    pub retrieval: Option<RetrievalReport>,
    pub linear_probe: Vec<ProbeReport>,
}

/// Runs the selected protocols on the test split.
pub fn evaluate(corpus: &Corpus, cfg: &RunConfig, params: &ParamStore, tasks: &Tasks) -> Result<EvalReport> {
    if !tasks.zero_shot && !tasks.retrieval && tasks.probe_fractions.is_empty() {
        return Ok(EvalReport {
            zero_shot: None,
            retrieval: None,
            linear_probe: Vec::new(),
        });
    }
    let model = Model::new(cfg);
    let (vision, projectors) = (&model.vision, &model.projectors);
    let text = TextEncoder::new(corpus.vocab.len(), &cfg.encoders);
    let test = corpus.split(Split::Test);
    let test_imgs: Vec<&Image> = test.iter().map(|r| &r.image).collect();
    let test_feats = high_level_features(vision, params, &test_imgs)?;
    let test_labels: Vec<Vec<bool>> = test.iter().map(|r| r.conditions.clone()).collect();

    let needs_projection = tasks.zero_shot || tasks.retrieval;
    let img_emb = if needs_projection {
        project(&projectors.visual, params, &test_feats)?
    } else {
        Vec::new()
    };

    let zero_shot = if tasks.zero_shot {
        let names = corpus.condition_names();
        let no = corpus.vocab.id("no").ok_or_else(|| Error::Corpus("vocabulary lacks `no`".into()))?;
        let mut prompts = Vec::with_capacity(2 * names.len());
        for name in &names {
            let id = corpus
                .vocab
                .id(name)
                .ok_or_else(|| Error::Corpus(format!("vocabulary lacks `{name}`")))?;
            prompts.push(text.encode(&[id])?.0);
            prompts.push(text.encode(&[no, id])?.0);
        }
        let prompt_emb = project(&projectors.text, params, &prompts)?;
        let scores: Vec<Vec<f64>> = img_emb
            .iter()
            .map(|e| {
                (0..names.len())
                    .map(|k| dot(e, &prompt_emb[2 * k]) - dot(e, &prompt_emb[2 * k + 1]))
                    .collect()
            })
            .collect();
        Some(zero_shot_metrics(&names, &scores, &test_labels))
    } else {
        None
    };

    let retrieval = if tasks.retrieval {
        let single: Vec<(usize, usize)> = test
            .iter()
            .enumerate()
            .filter_map(|(i, r)| {
                let active: Vec<usize> = r.active().collect();
                (active.len() == 1).then(|| (i, active[0]))
            })
            .collect();
        let queries: Vec<Vec<f64>> = single.iter().map(|&(i, _)| img_emb[i].clone()).collect();
        let cats: Vec<usize> = single.iter().map(|s| s.1).collect();
        let reports = single
            .iter()
            .map(|&(i, _)| text.encode(&test[i].impressions).map(|e| e.0))
            .collect::<Result<Vec<_>>>()?;
        let cands = project(&projectors.text, params, &reports)?;
        let ks: Vec<usize> = RETRIEVAL_KS.iter().copied().filter(|&k| k <= cands.len()).collect();
        if ks.is_empty() {
            None
        } else {
            Some(precision_at_k(&queries, &cats, &cands, &cats, &ks)?)
        }
    } else {
        None
    };

    let mut linear = Vec::new();
    if !tasks.probe_fractions.is_empty() {
        let train = corpus.split(Split::Train);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.train.seed, "probe", &[]));
        let train_imgs: Vec<&Image> = order.iter().map(|&i| &train[i].image).collect();
        let train_feats = high_level_features(vision, params, &train_imgs)?;
        let train_labels: Vec<Vec<bool>> = order.iter().map(|&i| train[i].conditions.clone()).collect();
        for &f in &tasks.probe_fractions {
            let n = ((f * train.len() as f64).ceil() as usize).clamp(2, train.len());
            linear.push(linear_probe(&train_feats[..n], &train_labels[..n], &test_feats, &test_labels, f));
        }
    }

    Ok(EvalReport {
        zero_shot,
        retrieval,
        linear_probe: linear,
    })
}
