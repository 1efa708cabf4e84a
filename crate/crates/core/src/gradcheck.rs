//! Finite-difference check of the full training objective.

use imitate_autodiff::{GradCheck, GradCheckError, GradCheckReport, Graph, Tensor, TensorError, Var};
use rand::Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hier_agg::DropMasks;
use crate::model::Model;
use crate::rng;

/// Smallest config that still exercises every module; cheap enough to
/// perturb every parameter entry.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.encoders.image_size = 16;
    cfg.encoders.widths = vec![2, 3, 4, 5];
    cfg.encoders.text_dim = 6;
    cfg.aggregator.grid = 2;
    cfg.aggregator.heads = 2;
    cfg.aggregator.ffn_hidden = 4;
    cfg.aggregator.output_dim = 5;
    cfg.aggregator.drop_ratios = vec![0.5, 0.5, 0.5, 0.5];
    cfg.objective.projector_hidden = 6;
    cfg.objective.shared_dim = 4;
    cfg
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen::<f64>()).collect()).expect("shape matches data")
}

/// Parameter names paired with their per-tensor agreement.
pub struct ModelCheck {
    pub names: Vec<String>,
    pub report: GradCheckReport,
    pub scalars: usize,
}

/// Compares analytic and central-difference gradients of the total loss
/// with respect to every parameter, on a random batch of `batch` records.
/// Zero-initialised biases are jittered first so their gradients are
/// checked away from the symmetric starting point.
pub fn check_model(cfg: &RunConfig, batch: usize, seed: u64, checker: &GradCheck) -> Result<ModelCheck> {
    cfg.validate()?;
    let model = Model::new(cfg);
    let mut store = model.init(seed);
    let mut r = rng::stream(seed, "gradcheck", &[]);
    for t in store.tensors_mut() {
        if t.rank() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
        }
    }
    let s = cfg.encoders.image_size;
    let d = cfg.encoders.text_dim;
    let views = uniform(&mut r, &[2 * batch, 1, s, s]);
    let tf = uniform(&mut r, &[batch, d]);
    let ti = uniform(&mut r, &[batch, d]);
    let masks = [
        DropMasks::sample(&cfg.encoders.widths, &cfg.aggregator.drop_ratios, &mut r),
        DropMasks::sample(&cfg.encoders.widths, &cfg.aggregator.drop_ratios, &mut r),
    ];
    let f = |g: &mut Graph, vars: &[Var]| -> std::result::Result<Var, TensorError> {
        let p = store.bind_vars(vars);
        let x = g.constant(views.clone());
        model
            .loss(g, &p, x, &tf, &ti, &masks)
            .map(|l| l.total)
            .map_err(|e| TensorError::Invalid {
                op: "total_loss",
                msg: e.to_string(),
            })
    };
    let report = checker.run(f, store.tensors()).map_err(|e| match e {
        GradCheckError::Function(t) => Error::Tensor(t),
        other => Error::Config(other.to_string()),
    })?;
    Ok(ModelCheck {
        names: store.names().to_vec(),
        scalars: store.num_scalars(),
        report,
    })
}
