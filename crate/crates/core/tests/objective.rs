use imitate_autodiff::{Graph, Tensor};
use imitate_core::config::{Alignment, Kernel, ObjectiveConfig, TermToggles};
use imitate_core::objective::{
    cicl_loss, cl_loss, report_correlation, similarity_matrix, smooth, total_loss, BatchLatents, CorrelationTarget,
    Projector, Projectors, Term,
};
use imitate_core::params::ParamStore;
use imitate_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn scalar(g: &Graph, v: imitate_autodiff::Var) -> f64 {
    g.value(v).item()
}

// Brute-force oracles.

fn oracle_logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn oracle_cl(s: &Tensor, tau: f64) -> f64 {
    let n = s.shape()[0];
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s.get(&[i, j]) / tau).collect();
        total += oracle_logsumexp(&row) - row[i];
    }
    total
}

fn oracle_cicl(s: &Tensor, r: &Tensor, tau: f64) -> f64 {
    let n = s.shape()[0];
    let clamp = |i: usize, j: usize| r.get(&[i, j]).clamp(0.0, 1.0);
    let mut total = 0.0;
    for i in 0..n {
        let row: Vec<f64> = (0..n).map(|j| s.get(&[i, j]) / tau).collect();
        let col: Vec<f64> = (0..n).map(|j| s.get(&[j, i]) / tau).collect();
        let (lr, lc) = (oracle_logsumexp(&row), oracle_logsumexp(&col));
        let zr: f64 = (0..n).map(|j| clamp(i, j)).sum();
        let zc: f64 = (0..n).map(|j| clamp(j, i)).sum();
        for j in 0..n {
            total -= clamp(i, j) / zr * (row[j] - lr);
            total -= clamp(j, i) / zc * (col[j] - lc);
        }
    }
    total / (2 * n) as f64
}

fn oracle_pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for k in 0..a.len() {
        cov += (a[k] - ma) * (b[k] - mb);
        va += (a[k] - ma) * (a[k] - ma);
        vb += (b[k] - mb) * (b[k] - mb);
    }
    cov / (va * vb).sqrt()
}

fn eval_cl(s: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let l = cl_loss(&mut g, v, tau).unwrap();
    scalar(&g, l)
}

fn eval_cicl(s: &Tensor, r: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(s.clone());
    let l = cicl_loss(&mut g, v, r, tau).unwrap();
    scalar(&g, l)
}

fn eye(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.set(&[i, i], 1.0);
    }
    t
}

fn identity_projector(store: &mut ParamStore, prefix: &str, d: usize) -> Projector {
    let p = Projector::new(prefix, d, d, d);
    store.insert(format!("{prefix}.fc1.weight"), eye(d));
    store.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[d]));
    store.insert(format!("{prefix}.fc2.weight"), eye(d));
    store.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[d]));
    p
}

#[test]
fn identity_projectors_on_orthonormal_rows() {
    let mut store = ParamStore::new();
    let p1 = identity_projector(&mut store, "a", 3);
    let z = eye(3);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let z1 = g.constant(z.clone());
    let s = similarity_matrix(&mut g, &b, z1, z1, &p1, &p1).unwrap();
    assert!(g.value(s).max_abs_diff(&eye(3)).unwrap() < 1e-15);
}

#[test]
fn similarity_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let p1 = Projector::new("a", 5, 6, 4);
    let p2 = Projector::new("b", 7, 6, 4);
    p1.init(&mut store, &mut rng);
    p2.init(&mut store, &mut rng);
    let z1 = random(&mut rng, 3, 5);
    let z2 = random(&mut rng, 3, 7);

    let project = |w1: &Tensor, b1: &Tensor, w2: &Tensor, b2: &Tensor, x: &[f64]| -> Vec<f64> {
        let (din, h) = (w1.shape()[0], w1.shape()[1]);
        let dout = w2.shape()[1];
        let hid: Vec<f64> = (0..h)
            .map(|j| ((0..din).map(|i| x[i] * w1.get(&[i, j])).sum::<f64>() + b1.data()[j]).max(0.0))
            .collect();
        let out: Vec<f64> = (0..dout)
            .map(|k| (0..h).map(|j| hid[j] * w2.get(&[j, k])).sum::<f64>() + b2.data()[k])
            .collect();
        let n = out.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.iter().map(|v| v / n).collect()
    };
    let get = |n: &str| store.get(n).unwrap();
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let (v1, v2) = (g.constant(z1.clone()), g.constant(z2.clone()));
    let s = similarity_matrix(&mut g, &b, v1, v2, &p1, &p2).unwrap();
    let s_rev = similarity_matrix(&mut g, &b, v2, v1, &p2, &p1).unwrap();
    for i in 0..3 {
        let a = project(get("a.fc1.weight"), get("a.fc1.bias"), get("a.fc2.weight"), get("a.fc2.bias"), z1.row(i));
        for j in 0..3 {
            let c = project(get("b.fc1.weight"), get("b.fc1.bias"), get("b.fc2.weight"), get("b.fc2.bias"), z2.row(j));
            let dot: f64 = a.iter().zip(&c).map(|(x, y)| x * y).sum();
            assert!((g.value(s).get(&[i, j]) - dot).abs() < 1e-12);
            assert!((g.value(s_rev).get(&[j, i]) - dot).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_rejects_batch_mismatch() {
    let mut store = ParamStore::new();
    let p = identity_projector(&mut store, "a", 2);
    let mut g = Graph::new();
    let b = store.bind(&mut g, false);
    let z1 = g.constant(Tensor::zeros(&[3, 2]));
    let z2 = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(similarity_matrix(&mut g, &b, z1, z2, &p, &p), Err(Error::BatchMismatch(3, 2))));
}

#[test]
fn cl_loss_examples() {
    assert_eq!(eval_cl(&Tensor::new(vec![1, 1], vec![0.3]).unwrap(), 0.07), 0.0);
    let uniform = Tensor::full(&[2, 2], 0.4);
    assert!((eval_cl(&uniform, 0.07) - 2.0 * 2f64.ln()).abs() < 1e-12);
    let tau = 0.07;
    let mut s = Tensor::full(&[4, 4], 0.0);
    for i in 0..4 {
        s.set(&[i, i], 20.0 * tau);
    }
    let l = eval_cl(&s, tau);
    assert!(l < 1e-6 && l > 0.0, "{l}");
    // closed form: B·log(1 + (B−1)e^{−20})
    assert!((l - 4.0 * (3.0 * (-20f64).exp()).ln_1p()).abs() < 1e-15);
}

#[test]
fn cicl_examples() {
    let s = Tensor::full(&[5, 5], 0.3);
    let uniform = Tensor::full(&[5, 5], 1.0);
    assert!((eval_cicl(&s, &uniform, 0.07) - 5f64.ln()).abs() < 1e-12);

    let mut g = Graph::new();
    let v = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(cicl_loss(&mut g, v, &eye(2), 0.07), Err(Error::NotSquare { .. })));
    let v = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(cicl_loss(&mut g, v, &eye(3), 0.07), Err(Error::BatchMismatch(2, 3))));
}

#[test]
fn cicl_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let s = random(&mut rng, 4, 4);
        let zt = random(&mut rng, 4, 16);
        let t = CorrelationTarget::build(&zt, Kernel::Exponential, 0.7).unwrap();
        let got = eval_cicl(&s, &t.r_smooth, 0.07);
        assert!((got - oracle_cicl(&s, &t.r_smooth, 0.07)).abs() < 1e-12);
    }
}

#[test]
fn cicl_identity_target_reduces_to_cl() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for b in 2..7 {
        let s = random(&mut rng, b, b);
        let mut st = s.clone();
        for i in 0..b {
            for j in 0..b {
                st.set(&[i, j], s.get(&[j, i]));
            }
        }
        let lhs = eval_cicl(&s, &eye(b), 0.07);
        let rhs = (eval_cl(&s, 0.07) + eval_cl(&st, 0.07)) / (2 * b) as f64;
        assert!((eval_cl(&s, 0.07) - oracle_cl(&s, 0.07)).abs() < 1e-12);
        assert!((lhs - rhs).abs() < 1e-10);
    }
}

#[test]
fn correlation_examples() {
    let zt = Tensor::from_rows(&[vec![1.0, 2.0, 4.0], vec![1.0, 2.0, 4.0]]).unwrap();
    assert!((report_correlation(&zt).unwrap().r.get(&[0, 1]) - 1.0).abs() < 1e-15);
    let zt = Tensor::from_rows(&[vec![-1.0, 0.5, 0.5], vec![1.0, -0.5, -0.5]]).unwrap();
    assert!((report_correlation(&zt).unwrap().r.get(&[0, 1]) + 1.0).abs() < 1e-15);
}

#[test]
fn correlation_flags_constant_rows() {
    let zt = Tensor::from_rows(&[vec![0.1; 8], vec![1.0, 2.0, 0.0, 3.0, 1.0, 2.0, 0.5, 0.0], vec![3.0, 1.0, 2.0, 0.0, 1.0, 4.0, 0.5, 2.0]])
        .unwrap();
    let c = report_correlation(&zt).unwrap();
    assert_eq!(c.degenerate, vec![0]);
    assert_eq!(c.r.get(&[0, 1]), 0.0);
    assert_eq!(c.r.get(&[2, 0]), 0.0);
    assert_eq!(c.r.get(&[0, 0]), 1.0);
    assert!(c.r.get(&[1, 2]) != 0.0);
}

#[test]
fn correlation_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let zt = random(&mut rng, 4, 64);
        let r = report_correlation(&zt).unwrap().r;
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { oracle_pearson(zt.row(i), zt.row(j)) };
                assert!((r.get(&[i, j]) - want).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn smooth_examples() {
    let r = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    for k in Kernel::ALL {
        let out = smooth(&r, 0.2, k).unwrap();
        assert_eq!(out.get(&[0, 0]), 1.0);
    }
    assert_eq!(smooth(&r, 0.2, Kernel::Exponential).unwrap().get(&[0, 1]), 0.0);
    let r = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
    let v = smooth(&r, 0.2, Kernel::Exponential).unwrap().get(&[0, 1]);
    assert!((v - 0.181_269_246_922_018_17).abs() < 1e-12);
}

fn latents_config(terms: TermToggles) -> ObjectiveConfig {
    ObjectiveConfig {
        terms,
        ..ObjectiveConfig::default()
    }
}

struct Fixture {
    store: ParamStore,
    projectors: Projectors,
    vis: Vec<Tensor>,
    texts: Vec<Tensor>,
}

fn fixture(seed: u64, b: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ObjectiveConfig {
        projector_hidden: 16,
        shared_dim: 4,
        ..ObjectiveConfig::default()
    };
    let projectors = Projectors::new(5, 7, &cfg);
    let mut store = ParamStore::new();
    projectors.init(&mut store, &mut rng);
    let vis = (0..4).map(|_| random(&mut rng, b, 5)).collect();
    let texts = (0..2).map(|_| random(&mut rng, b, 7)).collect();
    Fixture {
        store,
        projectors,
        vis,
        texts,
    }
}

fn run_total(f: &Fixture, cfg: &ObjectiveConfig) -> (f64, Vec<(Term, f64)>) {
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, false);
    let v: Vec<_> = f.vis.iter().chain(&f.texts).map(|t| g.constant(t.clone())).collect();
    let latents = BatchLatents {
        z_vm1: Some(v[0]),
        z_vh1: Some(v[1]),
        z_vm2: Some(v[2]),
        z_vh2: Some(v[3]),
        z_tf: Some(v[4]),
        z_ti: Some(v[5]),
    };
    let out = total_loss(&mut g, &p, &latents, &f.projectors, cfg).unwrap();
    let terms = out.terms.iter().map(|&(t, v)| (t, scalar(&g, v))).collect();
    (scalar(&g, out.total), terms)
}

#[test]
fn total_is_sum_of_terms() {
    let f = fixture(5, 4);
    let (total, terms) = run_total(&f, &ObjectiveConfig::default());
    assert_eq!(terms.len(), 6);
    let sum: f64 = terms.iter().map(|t| t.1).sum();
    assert!((total - sum).abs() < 1e-12);
}

#[test]
fn six_equal_terms_give_six_times() {
    // same latent everywhere and identical projectors make every term equal
    let mut f = fixture(6, 4);
    let z = f.vis[0].clone();
    f.vis = vec![z.clone(); 4];
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ObjectiveConfig::default();
    let shared = Projectors::new(5, 5, &ObjectiveConfig {
        projector_hidden: 16,
        shared_dim: 4,
        ..cfg.clone()
    });
    shared.visual.init(&mut store, &mut rng);
    let names: Vec<String> = store.names().to_vec();
    for n in names {
        let t = store.get(&n).unwrap().clone();
        store.insert(n.replace("proj.visual", "proj.text"), t);
    }
    f.store = store;
    f.projectors = shared;
    f.texts = vec![z.clone(), z];
    let (total, terms) = run_total(&f, &cfg);
    let l0 = terms[0].1;
    assert!(terms.iter().all(|t| (t.1 - l0).abs() < 1e-12));
    assert!((total - 6.0 * l0).abs() < 1e-11);
}

#[test]
fn term_toggles_select_terms() {
    let f = fixture(7, 4);
    let cfg = latents_config(TermToggles {
        vvh: true,
        vlh: true,
        vvm: false,
        vlm: false,
    });
    let (_, terms) = run_total(&f, &cfg);
    let names: Vec<&str> = terms.iter().map(|t| t.0.name()).collect();
    assert_eq!(names, vec!["vlh1", "vlh2", "vvh"]);
}

#[test]
fn missing_role_is_named() {
    let f = fixture(8, 4);
    let mut g = Graph::new();
    let p = f.store.bind(&mut g, false);
    let z = g.constant(f.vis[0].clone());
    let t = g.constant(f.texts[0].clone());
    let latents = BatchLatents {
        z_vm1: Some(z),
        z_vh1: Some(z),
        z_vm2: None,
        z_vh2: Some(z),
        z_tf: Some(t),
        z_ti: Some(t),
    };
    let err = total_loss(&mut g, &p, &latents, &f.projectors, &ObjectiveConfig::default()).unwrap_err();
    assert!(matches!(err, Error::MissingLatent("z_vm2")));
    assert!(err.to_string().contains("z_vm2"));
}

#[test]
fn reversed_swaps_text_pairings() {
    let f = fixture(9, 4);
    let full = run_total(&f, &ObjectiveConfig::default()).1;
    let mut swapped = fixture(9, 4);
    swapped.texts.swap(0, 1);
    let rev = run_total(
        &swapped,
        &ObjectiveConfig {
            alignment: Alignment::Reversed,
            ..ObjectiveConfig::default()
        },
    )
    .1;
    for (a, b) in full.iter().zip(&rev) {
        assert_eq!(a.0, b.0);
        assert!((a.1 - b.1).abs() < 1e-12);
    }
}

#[test]
fn total_invariant_under_batch_permutation() {
    let f = fixture(10, 5);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| {
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
        Tensor::from_rows(&rows).unwrap()
    };
    let g = Fixture {
        store: f.store.clone(),
        projectors: f.projectors.clone(),
        vis: f.vis.iter().map(permute).collect(),
        texts: f.texts.iter().map(permute).collect(),
    };
    let (a, _) = run_total(&f, &ObjectiveConfig::default());
    let (b, _) = run_total(&g, &ObjectiveConfig::default());
    assert!((a - b).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn correlation_is_valid(seed in any::<u64>(), b in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zt = random(&mut rng, b, 12);
        let r = report_correlation(&zt).unwrap().r;
        for i in 0..b {
            prop_assert_eq!(r.get(&[i, i]), 1.0);
            for j in 0..b {
                prop_assert_eq!(r.get(&[i, j]), r.get(&[j, i]));
                prop_assert!(r.get(&[i, j]).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn exponential_smoothing_is_monotone(a in -1.0f64..1.0, b in -1.0f64..1.0, lambda in 0.05f64..2.0) {
        let (fa, fb) = (Kernel::Exponential.apply(a, lambda), Kernel::Exponential.apply(b, lambda));
        if a < b {
            prop_assert!(fa < fb);
        }
        prop_assert!(fa > 1.0 - lambda.exp() && fa <= 1.0 - (-lambda).exp());
    }

    #[test]
    fn cicl_at_least_target_entropy(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random(&mut rng, 4, 4);
        let zt = random(&mut rng, 4, 10);
        let t = CorrelationTarget::build(&zt, Kernel::Exponential, 0.5).unwrap();
        let soft = imitate_core::objective::soft_targets(&t.r_smooth).unwrap();
        let mut cols = t.r_smooth.clone();
        for i in 0..4 { for j in 0..4 { cols.set(&[i, j], t.r_smooth.get(&[j, i])); } }
        let soft_c = imitate_core::objective::soft_targets(&cols).unwrap();
        let entropy = |m: &Tensor| -m.data().iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let h = (entropy(&soft) + entropy(&soft_c)) / 8.0;
        prop_assert!(eval_cicl(&s, &t.r_smooth, 0.07) >= h - 1e-12);
    }
}

#[test]
fn cicl_equals_entropy_when_prediction_matches() {
    // symmetric circulant target: row and column distributions coincide
    let base = [1.0, 0.3, 0.1, 0.3];
    let mut r = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        for j in 0..4 {
            r.set(&[i, j], base[(j + 4 - i) % 4]);
        }
    }
    let z: f64 = base.iter().sum();
    let s = r.map(|v| 0.07 * (v / z).ln());
    let h = -base.iter().map(|v| v / z * (v / z).ln()).sum::<f64>();
    assert!((eval_cicl(&s, &r, 0.07) - h).abs() < 1e-12);
}
