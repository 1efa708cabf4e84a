//! Pre-training loop.

use std::time::Instant;

use imitate_autodiff::{Graph, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{Alignment, RunConfig};
use crate::encoders::{augment, TextEncoder};
use crate::error::{Error, Result};
use crate::hier_agg::DropMasks;
use crate::image::{self, Image};
use crate::model::Model;
use crate::objective::{LossBreakdown, Term};
use crate::optim::{AdamW, Schedule};
use crate::params::ParamStore;
use crate::rng;
use crate::synth::{Corpus, Record, Split};

/// Frozen text embeddings of every record, computed once.
#[derive(Clone, Debug)]
pub struct TextCache {
    findings: Vec<Vec<f64>>,
    impressions: Vec<Vec<f64>>,
    concatenated: Vec<Vec<f64>>,
}

impl TextCache {
    pub fn build(enc: &TextEncoder, records: &[Record]) -> Result<Self> {
        let mut c = Self {
            findings: Vec::with_capacity(records.len()),
            impressions: Vec::with_capacity(records.len()),
            concatenated: Vec::with_capacity(records.len()),
        };
        for r in records {
            r.check_report()?;
            c.findings.push(enc.encode(&r.findings)?.0);
            c.impressions.push(enc.encode(&r.impressions)?.0);
            c.concatenated.push(enc.encode(&r.report())?.0);
        }
        Ok(c)
    }

    /// `(z_tF, z_tI)` for the given record positions. Concatenated
    /// alignment feeds the whole report into both slots.
    pub fn batch(&self, idx: &[usize], alignment: Alignment) -> (Tensor, Tensor) {
        let stack = |src: &[Vec<f64>]| {
            let d = src[0].len();
            let data = idx.iter().flat_map(|&i| src[i].iter().copied()).collect();
            Tensor::new(vec![idx.len(), d], data).expect("text batch shape")
        };
        match alignment {
            Alignment::Concatenated => (stack(&self.concatenated), stack(&self.concatenated)),
            _ => (stack(&self.findings), stack(&self.impressions)),
        }
    }

    pub fn impressions(&self, i: usize) -> &[f64] {
        &self.impressions[i]
    }
}

/// One line of the metrics log. Wall-clock time is kept out so that logs
/// of identical runs are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub phase: &'static str,
    pub lr: f64,
    pub total: f64,
    pub vlh1: Option<f64>,
    pub vlh2: Option<f64>,
    pub vlm1: Option<f64>,
    pub vlm2: Option<f64>,
    pub vvh: Option<f64>,
    pub vvm: Option<f64>,
}

impl MetricsRow {
    fn new(step: usize, epoch: usize, phase: &'static str, lr: f64, total: f64, terms: &[(Term, f64)]) -> Self {
        let get = |t: Term| terms.iter().find(|x| x.0 == t).map(|x| x.1);
        Self {
            step,
            epoch,
            phase,
            lr,
            total,
            vlh1: get(Term::Vlh1),
            vlh2: get(Term::Vlh2),
            vlm1: get(Term::Vlm1),
            vlm2: get(Term::Vlm2),
            vvh: get(Term::Vvh),
            vvm: get(Term::Vvm),
        }
    }
}

/// Writes rows as CSV with a header.
pub fn write_metrics<W: std::io::Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss (final ones when
    /// validation never ran).
    pub params: ParamStore,
    pub metrics: Vec<MetricsRow>,
    pub epoch_seconds: Vec<f64>,
    /// Training loss of the very first step.
    pub initial_loss: Option<f64>,
    /// Mean training loss over the last epoch.
    pub final_loss: Option<f64>,
    pub best_valid: Option<f64>,
    pub steps: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub text_hash_before: String,
    pub text_hash_after: String,
}

/// Drop masks used for every validation and evaluation pass.
pub fn eval_masks(cfg: &RunConfig) -> [DropMasks; 2] {
    let a = &cfg.aggregator;
    let mut r1 = rng::stream(a.eval_seed, "mask", &[1]);
    let mut r2 = rng::stream(a.eval_seed, "mask", &[2]);
    [
        DropMasks::sample(&cfg.encoders.widths, &a.drop_ratios, &mut r1),
        DropMasks::sample(&cfg.encoders.widths, &a.drop_ratios, &mut r2),
    ]
}

fn view_stack(records: &[&Record], seed: impl Fn(&Record) -> u64) -> Result<Tensor> {
    let mut first = Vec::with_capacity(records.len());
    let mut second = Vec::with_capacity(records.len());
    for r in records {
        let (a, b) = augment(&r.image, seed(r));
        first.push(a);
        second.push(b);
    }
    let all: Vec<&Image> = first.iter().chain(&second).collect();
    image::stack(&all)
}

fn term_values(g: &Graph, out: &LossBreakdown) -> Vec<(Term, f64)> {
    out.terms.iter().map(|&(t, v)| (t, g.value(v).item())).collect()
}

fn non_finite_term(terms: &[(Term, f64)]) -> String {
    terms
        .iter()
        .find(|t| !t.1.is_finite())
        .map(|t| t.0.name().to_string())
        .unwrap_or_else(|| "total".to_string())
}

struct Context<'a> {
    cfg: &'a RunConfig,
    model: Model,
    train: &'a [Record],
    valid: Vec<&'a Record>,
    train_text: TextCache,
    valid_text: TextCache,
    eval_masks: [DropMasks; 2],
}

impl Context<'_> {
    /// First term whose gradient alone is non-finite, replaying the step
    /// once per term.
    fn blame_gradient(&self, params: &ParamStore, views: &Tensor, tf: &Tensor, ti: &Tensor, masks: &[DropMasks; 2]) -> Result<String> {
        for term in Term::ALL {
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let x = g.constant(views.clone());
            let out = self.model.loss(&mut g, &p, x, tf, ti, masks)?;
            let Some(&(_, var)) = out.terms.iter().find(|t| t.0 == term) else {
                continue;
            };
            g.backward(var)?;
            if p.grads(&g).iter().any(|t| !t.all_finite()) {
                return Ok(term.name().to_string());
            }
        }
        Ok("total".to_string())
    }

    /// Mean validation loss over fixed views and masks.
    fn validate(&self, params: &ParamStore) -> Result<Option<(f64, Vec<(Term, f64)>)>> {
        let b = self.cfg.train.batch_size;
        let seed = self.cfg.train.seed;
        let mut sum = 0.0;
        let mut sums = vec![0.0; 6];
        let mut batches = 0;
        let mut names = Vec::new();
        for (c, chunk) in self.valid.chunks(b).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = (c * b..c * b + chunk.len()).collect();
            let views = view_stack(chunk, |r| rng::derive_seed(seed, "valid-view", &[r.id]))?;
            let (tf, ti) = self.valid_text.batch(&idx, self.cfg.objective.alignment);
            let mut g = Graph::new();
            let p = params.bind(&mut g, false);
            let x = g.constant(views);
            let out = self.model.loss(&mut g, &p, x, &tf, &ti, &self.eval_masks)?;
            sum += g.value(out.total).item();
            let terms = term_values(&g, &out);
            for (i, t) in terms.iter().enumerate() {
                sums[i] += t.1;
            }
            names = terms.iter().map(|t| t.0).collect();
            batches += 1;
        }
        if batches == 0 {
            return Ok(None);
        }
        let n = batches as f64;
        let terms = names.into_iter().zip(sums.into_iter().map(|s| s / n)).collect();
        Ok(Some((sum / n, terms)))
    }
}

/// Trains from the config's initial parameters.
pub fn pretrain(corpus: &Corpus, cfg: &RunConfig) -> Result<TrainOutcome> {
    let init = Model::new(cfg).init(cfg.train.seed);
    pretrain_from(corpus, cfg, init)
}

pub fn pretrain_from(corpus: &Corpus, cfg: &RunConfig, init: ParamStore) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.manifest.image_size != cfg.encoders.image_size {
        return Err(Error::Config(format!(
            "corpus images are {0}x{0} but the encoder expects {1}x{1}",
            corpus.manifest.image_size, cfg.encoders.image_size
        )));
    }
    let text = TextEncoder::new(corpus.vocab.len(), &cfg.encoders);
    let text_hash_before = text.hash();
    let train = corpus.split(Split::Train);
    let t = &cfg.train;
    let mut valid: Vec<&Record> = corpus.split(Split::Valid).iter().collect();
    if t.val_max_records > 0 {
        valid.truncate(t.val_max_records);
    }
    let valid_owned: Vec<Record> = valid.iter().map(|r| (*r).clone()).collect();
    let ctx = Context {
        cfg,
        model: Model::new(cfg),
        train,
        train_text: TextCache::build(&text, train)?,
        valid_text: TextCache::build(&text, &valid_owned)?,
        valid,
        eval_masks: eval_masks(cfg),
    };

    let b = t.batch_size;
    let per_epoch = ctx.train.len() / b;
    let total_steps = per_epoch * t.epochs;
    let schedule = Schedule::new(t.lr, t.warmup_frac, total_steps);
    let mut params = init;
    let mut opt = AdamW::new(t, params.tensors());
    let mut metrics = Vec::new();
    let mut epoch_seconds = Vec::new();
    let mut initial_loss = None;
    let mut final_loss = None;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let mut epochs_run = 0;

    let mut check_valid = |params: &ParamStore, step: usize, epoch: usize, metrics: &mut Vec<MetricsRow>| -> Result<bool> {
        let Some((loss, terms)) = ctx.validate(params)? else {
            return Ok(false);
        };
        metrics.push(MetricsRow::new(step, epoch, "valid", schedule.lr(step.min(total_steps.saturating_sub(1))), loss, &terms));
        info!("epoch {epoch} step {step}: validation loss {loss:.5}");
        match &best {
            Some((b, _)) if loss >= *b => {
                since_best += 1;
            }
            _ => {
                best = Some((loss, params.clone()));
                since_best = 0;
            }
        }
        Ok(t.patience > 0 && since_best >= t.patience)
    };

    'epochs: for epoch in 0..t.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..ctx.train.len()).collect();
        order.shuffle(&mut rng::stream(t.seed, "shuffle", &[epoch as u64]));
        let mut epoch_sum = 0.0;
        for chunk in order.chunks_exact(b) {
            let lr = schedule.lr(step);
            let recs: Vec<&Record> = chunk.iter().map(|&i| &ctx.train[i]).collect();
            let views = view_stack(&recs, |r| rng::derive_seed(t.seed, "view", &[epoch as u64, r.id]))?;
            let (tf, ti) = ctx.train_text.batch(chunk, cfg.objective.alignment);
            let mut mask_rng = rng::stream(t.seed, "mask", &[step as u64]);
            let masks = [
                DropMasks::sample(&cfg.encoders.widths, &cfg.aggregator.drop_ratios, &mut mask_rng),
                DropMasks::sample(&cfg.encoders.widths, &cfg.aggregator.drop_ratios, &mut mask_rng),
            ];
            let mut g = Graph::new();
            let p = params.bind(&mut g, true);
            let x = g.constant(views.clone());
            let out = ctx.model.loss(&mut g, &p, x, &tf, &ti, &masks)?;
            let total = g.value(out.total).item();
            let terms = term_values(&g, &out);
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    term: non_finite_term(&terms),
                    step,
                    last_good: Box::new(params),
                });
            }
            g.backward(out.total)?;
            let grads = p.grads(&g);
            if grads.iter().any(|t| !t.all_finite()) {
                let term = ctx.blame_gradient(&params, &views, &tf, &ti, &masks)?;
                return Err(Error::NonFinite {
                    term: format!("{term} (gradient)"),
                    step,
                    last_good: Box::new(params),
                });
            }
            opt.step(params.tensors_mut(), &grads, lr);
            if initial_loss.is_none() {
                initial_loss = Some(total);
            }
            epoch_sum += total;
            metrics.push(MetricsRow::new(step, epoch, "train", lr, total, &terms));
            debug!("step {step} lr {lr:.3e} loss {total:.5}");
            step += 1;
            if t.eval_every > 0 && step % t.eval_every == 0 && check_valid(&params, step, epoch, &mut metrics)? {
                stopped_early = true;
                epoch_seconds.push(started.elapsed().as_secs_f64());
                epochs_run = epoch + 1;
                break 'epochs;
            }
        }
        epochs_run = epoch + 1;
        if per_epoch > 0 {
            final_loss = Some(epoch_sum / per_epoch as f64);
            info!("epoch {epoch}: mean training loss {:.5}", epoch_sum / per_epoch as f64);
        }
        let stop = t.eval_every == 0 && check_valid(&params, step, epoch, &mut metrics)?;
        epoch_seconds.push(started.elapsed().as_secs_f64());
        if stop {
            stopped_early = true;
            break;
        }
    }

    let best_valid = best.as_ref().map(|b| b.0);
    let params = match best {
        Some((_, p)) if t.patience > 0 => p,
        _ => params,
    };
    Ok(TrainOutcome {
        params,
        metrics,
        epoch_seconds,
        initial_loss,
        final_loss,
        best_valid,
        steps: step,
        epochs_run,
        stopped_early,
        text_hash_before,
        text_hash_after: text.hash(),
    })
}
