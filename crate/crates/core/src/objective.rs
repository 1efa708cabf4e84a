//! Projectors, similarity, the classic and correlation-informed contrastive
//! losses, and the six-term training objective.

use imitate_autodiff::{Graph, Tensor, Var};
use rand::Rng;

use crate::config::{Alignment, Kernel, ObjectiveConfig, TermToggles};
use crate::error::{Error, Result};
use crate::nn::linear;
use crate::params::{he, xavier, Bound, ParamStore};

/// Two-layer map `linear → relu → linear` into the shared space.
#[derive(Clone, Debug)]
pub struct Projector {
    prefix: String,
    in_dim: usize,
    hidden: usize,
    out_dim: usize,
}

impl Projector {
    pub fn new(prefix: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            prefix: prefix.into(),
            in_dim,
            hidden,
            out_dim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let p = &self.prefix;
        store.insert(format!("{p}.fc1.weight"), he(rng, &[self.in_dim, self.hidden], self.in_dim));
        store.insert(format!("{p}.fc1.bias"), Tensor::zeros(&[self.hidden]));
        store.insert(format!("{p}.fc2.weight"), xavier(rng, self.hidden, self.out_dim));
        store.insert(format!("{p}.fc2.bias"), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = linear(g, p, x, &format!("{}.fc1", self.prefix))?;
        let h = g.relu(h);
        linear(g, p, h, &format!("{}.fc2", self.prefix))
    }

    /// Projection followed by row-wise length normalisation.
    pub fn embed(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        Ok(g.l2_normalize(y)?)
    }
}

/// The visual (`p_v`) and textual (`p_z`) projectors.
#[derive(Clone, Debug)]
pub struct Projectors {
    pub visual: Projector,
    pub text: Projector,
}

impl Projectors {
    pub fn new(visual_in: usize, text_in: usize, cfg: &ObjectiveConfig) -> Self {
        Self {
            visual: Projector::new("proj.visual", visual_in, cfg.projector_hidden, cfg.shared_dim),
            text: Projector::new("proj.text", text_in, cfg.projector_hidden, cfg.shared_dim),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.visual.init(store, rng);
        self.text.init(store, rng);
    }
}

fn rows(g: &Graph, v: Var) -> usize {
    g.shape(v)[0]
}

fn check_square(what: &'static str, shape: &[usize]) -> Result<usize> {
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::NotSquare {
            what,
            rows: shape.first().copied().unwrap_or(0),
            cols: shape.get(1).copied().unwrap_or(0),
        });
    }
    Ok(shape[0])
}

/// `S = â·b̂ᵀ` for already normalised embeddings.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (ra, rb) = (rows(g, a), rows(g, b));
    if ra != rb {
        return Err(Error::BatchMismatch(ra, rb));
    }
    let bt = g.transpose(b)?;
    Ok(g.matmul(a, bt)?)
}

/// `S[i,j] = ⟨p1(z1ᵢ), p2(z2ⱼ)⟩` with both projections length-normalised.
pub fn similarity_matrix(
    g: &mut Graph,
    p: &Bound,
    z1: Var,
    z2: Var,
    p1: &Projector,
    p2: &Projector,
) -> Result<Var> {
    let (r1, r2) = (rows(g, z1), rows(g, z2));
    if r1 != r2 {
        return Err(Error::BatchMismatch(r1, r2));
    }
    let a = p1.embed(g, p, z1)?;
    let b = p2.embed(g, p, z2)?;
    cosine_matrix(g, a, b)
}

fn identity(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.set(&[i, i], 1.0);
    }
    t
}

/// Summed InfoNCE over rows: `Σᵢ −log softmax(S/τ)[i,i]`.
pub fn cl_loss(g: &mut Graph, s: Var, tau: f64) -> Result<Var> {
    let n = check_square("similarity", g.shape(s))?;
    let scaled = g.scale(s, 1.0 / tau);
    let ls = g.log_softmax(scaled);
    let eye = g.constant(identity(n));
    let picked = g.mul(ls, eye)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0))
}

/// Pearson correlation between batch rows, with degenerate rows flagged.
#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    /// `B×B`, symmetric with unit diagonal.
    pub r: Tensor,
    /// Rows with zero variance; their off-diagonal entries are 0.
    pub degenerate: Vec<usize>,
}

/// Correlates each pair of rows of `zt` across the embedding dimension.
pub fn report_correlation(zt: &Tensor) -> Result<Correlation> {
    if zt.rank() != 2 || zt.shape()[1] < 2 {
        return Err(Error::Config(format!(
            "correlation needs a [B, d] matrix with d >= 2, got {:?}",
            zt.shape()
        )));
    }
    let (b, d) = (zt.shape()[0], zt.shape()[1]);
    let mut unit = Vec::with_capacity(b);
    let mut degenerate = Vec::new();
    for i in 0..b {
        let row = zt.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let centred: Vec<f64> = row.iter().map(|x| x - mean).collect();
        let norm = centred.iter().map(|x| x * x).sum::<f64>().sqrt();
        let scale = row.iter().fold(0.0_f64, |m, x| m.max(x.abs())).max(1.0);
        if norm <= 1e-12 * scale {
            degenerate.push(i);
            unit.push(None);
        } else {
            unit.push(Some(centred.into_iter().map(|x| x / norm).collect::<Vec<_>>()));
        }
    }
    let mut r = identity(b);
    for i in 0..b {
        for j in i + 1..b {
            let v = match (&unit[i], &unit[j]) {
                (Some(a), Some(c)) => a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0),
                _ => 0.0,
            };
            r.set(&[i, j], v);
            r.set(&[j, i], v);
        }
    }
    Ok(Correlation { r, degenerate })
}

impl Kernel {
    /// Off-diagonal target for correlation `r`.
    pub fn apply(self, r: f64, lambda: f64) -> f64 {
        match self {
            Kernel::Exponential => -(-lambda * r).exp_m1(),
            Kernel::Gaussian => (-r * r / (2.0 * lambda * lambda)).exp(),
            Kernel::Laplacian => (-r.abs() / lambda).exp(),
            Kernel::Sigmoid => (r / (2.0 * lambda)).tanh(),
            Kernel::Identity => 0.0,
        }
    }
}

/// Unit diagonal, kernel-mapped off-diagonal.
pub fn smooth(r: &Tensor, lambda: f64, kernel: Kernel) -> Result<Tensor> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidLambda(lambda));
    }
    let n = check_square("correlation", r.shape())?;
    let mut out = r.map(|v| kernel.apply(v, lambda));
    for i in 0..n {
        out.set(&[i, i], 1.0);
    }
    Ok(out)
}

/// Raw and smoothed report correlation for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationTarget {
    pub r: Tensor,
    pub r_smooth: Tensor,
    pub kernel: Kernel,
    pub lambda: f64,
    pub degenerate: Vec<usize>,
}

impl CorrelationTarget {
    pub fn build(zt: &Tensor, kernel: Kernel, lambda: f64) -> Result<Self> {
        let c = report_correlation(zt)?;
        let r_smooth = smooth(&c.r, lambda, kernel)?;
        Ok(Self {
            r: c.r,
            r_smooth,
            kernel,
            lambda,
            degenerate: c.degenerate,
        })
    }
}

/// Clamp to `[0, 1]`, then normalise each row to sum 1.
pub fn soft_targets(r_smooth: &Tensor) -> Result<Tensor> {
    let n = check_square("target", r_smooth.shape())?;
    let mut t = r_smooth.map(|v| v.clamp(0.0, 1.0));
    for i in 0..n {
        let row = &mut t.data_mut()[i * n..(i + 1) * n];
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    Ok(t)
}

fn transposed(t: &Tensor) -> Tensor {
    let n = t.shape()[0];
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            out.set(&[j, i], t.get(&[i, j]));
        }
    }
    out
}

/// Soft-target cross-entropy between `softmax(S/τ)` and the normalised
/// smoothed correlation, taken over rows and over columns and averaged
/// over the `2B` distributions.
///
/// With an identity target this is `(cl_loss(S) + cl_loss(Sᵀ)) / 2B`.
pub fn cicl_loss(g: &mut Graph, s: Var, r_smooth: &Tensor, tau: f64) -> Result<Var> {
    let n = check_square("similarity", g.shape(s))?;
    let m = check_square("target", r_smooth.shape())?;
    if n != m {
        return Err(Error::BatchMismatch(n, m));
    }
    let row_t = soft_targets(r_smooth)?;
    let col_t = soft_targets(&transposed(r_smooth))?;
    let scaled = g.scale(s, 1.0 / tau);
    let ls_rows = g.log_softmax(scaled);
    let st = g.transpose(scaled)?;
    let ls_cols = g.log_softmax(st);
    let tr = g.constant(row_t);
    let tc = g.constant(col_t);
    let a = g.mul(ls_rows, tr)?;
    let b = g.mul(ls_cols, tc)?;
    let a = g.sum(a);
    let b = g.sum(b);
    let total = g.add(a, b)?;
    Ok(g.scale(total, -1.0 / (2 * n) as f64))
}

/// The six loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    Vlh1,
    Vlh2,
    Vlm1,
    Vlm2,
    Vvh,
    Vvm,
}

impl Term {
    pub const ALL: [Term; 6] = [Term::Vlh1, Term::Vlh2, Term::Vlm1, Term::Vlm2, Term::Vvh, Term::Vvm];

    pub fn name(self) -> &'static str {
        match self {
            Term::Vlh1 => "vlh1",
            Term::Vlh2 => "vlh2",
            Term::Vlm1 => "vlm1",
            Term::Vlm2 => "vlm2",
            Term::Vvh => "vvh",
            Term::Vvm => "vvm",
        }
    }

    pub fn enabled(self, t: &TermToggles) -> bool {
        match self {
            Term::Vlh1 | Term::Vlh2 => t.vlh,
            Term::Vlm1 | Term::Vlm2 => t.vlm,
            Term::Vvh => t.vvh,
            Term::Vvm => t.vvm,
        }
    }
}

/// Latent codes of one batch. Text codes are graph constants.
#[derive(Clone, Copy, Debug, Default)]
pub struct BatchLatents {
    pub z_vm1: Option<Var>,
    pub z_vh1: Option<Var>,
    pub z_vm2: Option<Var>,
    pub z_vh2: Option<Var>,
    pub z_tf: Option<Var>,
    pub z_ti: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Vm1,
    Vh1,
    Vm2,
    Vh2,
    Tf,
    Ti,
}

impl Role {
    fn name(self) -> &'static str {
        match self {
            Role::Vm1 => "z_vm1",
            Role::Vh1 => "z_vh1",
            Role::Vm2 => "z_vm2",
            Role::Vh2 => "z_vh2",
            Role::Tf => "z_tF",
            Role::Ti => "z_tI",
        }
    }

    fn idx(self) -> usize {
        self as usize
    }
}

impl BatchLatents {
    fn get(&self, role: Role) -> Result<Var> {
        let v = match role {
            Role::Vm1 => self.z_vm1,
            Role::Vh1 => self.z_vh1,
            Role::Vm2 => self.z_vm2,
            Role::Vh2 => self.z_vh2,
            Role::Tf => self.z_tf,
            Role::Ti => self.z_ti,
        };
        v.ok_or(Error::MissingLatent(role.name()))
    }
}

/// Text roles aligned to the high-level and multi-level features.
fn text_roles(alignment: Alignment) -> (Role, Role) {
    match alignment {
        // Concatenated reports arrive in both text slots.
        Alignment::Full | Alignment::Concatenated => (Role::Ti, Role::Tf),
        Alignment::ImpressionsOnly => (Role::Ti, Role::Ti),
        Alignment::Reversed => (Role::Tf, Role::Ti),
    }
}

/// `(visual role, partner role, target text role)`; a visual partner means
/// a vision-vision term.
fn term_roles(term: Term, alignment: Alignment) -> (Role, Role, Role) {
    let (high, multi) = text_roles(alignment);
    match term {
        Term::Vlh1 => (Role::Vh1, high, high),
        Term::Vlh2 => (Role::Vh2, high, high),
        Term::Vlm1 => (Role::Vm1, multi, multi),
        Term::Vlm2 => (Role::Vm2, multi, multi),
        Term::Vvh => (Role::Vh1, Role::Vh2, high),
        Term::Vvm => (Role::Vm1, Role::Vm2, multi),
    }
}

/// Total objective with each enabled term kept separately.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub terms: Vec<(Term, Var)>,
    /// Rows flagged as degenerate while building targets.
    pub degenerate_rows: Vec<usize>,
}

/// Sums the enabled CICL terms. Only the latent roles those terms use must
/// be present.
pub fn total_loss(
    g: &mut Graph,
    p: &Bound,
    latents: &BatchLatents,
    projectors: &Projectors,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown> {
    let terms: Vec<Term> = Term::ALL.into_iter().filter(|t| t.enabled(&cfg.terms)).collect();
    if terms.is_empty() {
        return Err(Error::Config("no loss terms enabled".into()));
    }
    let mut embedded: [Option<Var>; 6] = [None; 6];
    let mut targets: [Option<Tensor>; 6] = Default::default();
    let mut degenerate_rows = Vec::new();
    let mut out = Vec::with_capacity(terms.len());
    for term in terms {
        let (vis, partner, text) = term_roles(term, cfg.alignment);
        let mut emb = |g: &mut Graph, role: Role| -> Result<Var> {
            if let Some(v) = embedded[role.idx()] {
                return Ok(v);
            }
            let z = latents.get(role)?;
            let proj = match role {
                Role::Tf | Role::Ti => &projectors.text,
                _ => &projectors.visual,
            };
            let v = proj.embed(g, p, z)?;
            embedded[role.idx()] = Some(v);
            Ok(v)
        };
        let a = emb(g, vis)?;
        let b = emb(g, partner)?;
        if targets[text.idx()].is_none() {
            let zt = g.value(latents.get(text)?).clone();
            let t = CorrelationTarget::build(&zt, cfg.kernel, cfg.lambda)?;
            degenerate_rows.extend(t.degenerate.iter().copied());
            targets[text.idx()] = Some(t.r_smooth);
        }
        let s = cosine_matrix(g, a, b)?;
        let target = targets[text.idx()].as_ref().expect("target built above");
        out.push((term, cicl_loss(g, s, target, cfg.tau)?));
    }
    let mut total = out[0].1;
    for &(_, v) in &out[1..] {
        total = g.add(total, v)?;
    }
    degenerate_rows.sort_unstable();
    degenerate_rows.dedup();
    Ok(LossBreakdown {
        total,
        terms: out,
        degenerate_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_values() {
        assert_eq!(Kernel::Exponential.apply(0.0, 0.2), 0.0);
        assert!((Kernel::Exponential.apply(1.0, 0.2) - 0.18126924692201818).abs() < 1e-15);
        assert_eq!(Kernel::Identity.apply(0.9, 0.2), 0.0);
        // 2σ(x) − 1 = tanh(x/2)
        let sig = 2.0 / (1.0 + (-0.5_f64 / 0.2).exp()) - 1.0;
        assert!((Kernel::Sigmoid.apply(0.5, 0.2) - sig).abs() < 1e-15);
    }

    #[test]
    fn smooth_rejects_bad_lambda() {
        let r = identity(3);
        assert!(matches!(smooth(&r, 0.0, Kernel::Exponential), Err(Error::InvalidLambda(_))));
        assert!(matches!(smooth(&r, -1.0, Kernel::Exponential), Err(Error::InvalidLambda(_))));
    }

    #[test]
    fn alignment_roles() {
        assert_eq!(term_roles(Term::Vlh1, Alignment::Reversed), (Role::Vh1, Role::Tf, Role::Tf));
        assert_eq!(term_roles(Term::Vlm2, Alignment::Reversed), (Role::Vm2, Role::Ti, Role::Ti));
        assert_eq!(term_roles(Term::Vvh, Alignment::Full), (Role::Vh1, Role::Vh2, Role::Ti));
        assert_eq!(term_roles(Term::Vvm, Alignment::Full), (Role::Vm1, Role::Vm2, Role::Tf));
    }
}
