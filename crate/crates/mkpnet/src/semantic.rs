//! Semantic adaptor: a VAE over instance-pair semantics. A posterior head
//! maps `[h_cls; h_y]` to a diagonal Gaussian, an independent prior head
//! maps `h_cls` alone, sampling uses the reparameterization trick, and the
//! two are tied by a closed-form KL term. One head set (`semantic.*`) is
//! shared by both tasks.

use crate::error::{Error, Result};
use crate::tensorgrad::{Binder, Graph, ParamSet, Rng, Tensor, TensorId};

pub const LOG_VAR_CLAMP: f32 = 8.0;

/// Diagonal Gaussian as plain values (inference-side convenience).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mu: Vec<f32>,
    pub log_var: Vec<f32>,
}

/// Graph-side Gaussian: node ids for μ and clamped log σ².
#[derive(Debug, Clone, Copy)]
pub struct GaussianNodes {
    pub mu: TensorId,
    pub log_var: TensorId,
}

impl GaussianNodes {
    pub fn values(&self, g: &Graph) -> GaussianParams {
        GaussianParams {
            mu: g.value(self.mu).data.clone(),
            log_var: g.value(self.log_var).data.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SemanticDims {
    pub d: usize,
    pub d_label: usize,
    pub d_z: usize,
}

/// Creates the shared θ^Semantic group: posterior regressors over
/// `[h_cls; h_y]` and an identically shaped, independently parameterized
/// prior set over `h_cls` alone.
pub fn init_params(ps: &mut ParamSet, dims: &SemanticDims, rng: &mut Rng) -> Result<()> {
    let head = |prefix: &str, in_dim: usize, ps: &mut ParamSet, rng: &mut Rng| -> Result<()> {
        ps.add(
            &format!("semantic.{prefix}.wz"),
            Tensor::new(vec![in_dim, dims.d_z], rng.normal_vec(in_dim * dims.d_z, 0.02))?,
        )?;
        ps.add(&format!("semantic.{prefix}.bz"), Tensor::zeros(vec![dims.d_z]))?;
        for out in ["mu", "sigma"] {
            ps.add(
                &format!("semantic.{prefix}.w{out}"),
                Tensor::new(vec![dims.d_z, dims.d_z], rng.normal_vec(dims.d_z * dims.d_z, 0.02))?,
            )?;
            ps.add(&format!("semantic.{prefix}.b{out}"), Tensor::zeros(vec![dims.d_z]))?;
        }
        Ok(())
    };
    head("post", dims.d + dims.d_label, ps, rng)?;
    head("prior", dims.d, ps, rng)
}

fn head_params(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    prefix: &str,
    input: TensorId,
) -> Result<GaussianNodes> {
    let wz = binder.bind(g, ps, &format!("semantic.{prefix}.wz"))?;
    let bz = binder.bind(g, ps, &format!("semantic.{prefix}.bz"))?;
    let wmu = binder.bind(g, ps, &format!("semantic.{prefix}.wmu"))?;
    let bmu = binder.bind(g, ps, &format!("semantic.{prefix}.bmu"))?;
    let wsig = binder.bind(g, ps, &format!("semantic.{prefix}.wsigma"))?;
    let bsig = binder.bind(g, ps, &format!("semantic.{prefix}.bsigma"))?;
    let proj = g.affine(input, wz, bz)?;
    let hz = g.tanh(proj)?;
    let mu = g.affine(hz, wmu, bmu)?;
    let log_var_raw = g.affine(hz, wsig, bsig)?;
    let log_var = g.clamp(log_var_raw, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?;
    Ok(GaussianNodes { mu, log_var })
}

/// Posterior q(h_z | h_cls, h_y): projects the concatenation through tanh,
/// then regresses μ and log σ².
pub fn posterior_params(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    h_cls: TensorId,
    h_y: TensorId,
) -> Result<GaussianNodes> {
    let joint = g.concat(h_cls, h_y)?;
    head_params(g, binder, ps, "post", joint)
}

/// Prior p(h_z | h_cls): same architecture, independent weights, no label
/// input.
pub fn prior_params(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    h_cls: TensorId,
) -> Result<GaussianNodes> {
    head_params(g, binder, ps, "prior", h_cls)
}

/// Draws ε ~ N(0, I) and returns the node for μ + σ⊙ε along with the drawn
/// ε (recorded so a run can be replayed exactly).
pub fn reparameterize(
    g: &mut Graph,
    gauss: &GaussianNodes,
    rng: &mut Rng,
) -> Result<(TensorId, Vec<f32>)> {
    let d = g.value(gauss.mu).numel();
    let eps: Vec<f32> = (0..d).map(|_| rng.normal()).collect();
    let h_z = reparameterize_with(g, gauss, &eps)?;
    Ok((h_z, eps))
}

/// μ + exp(log σ² / 2) ⊙ ε for a fixed ε.
pub fn reparameterize_with(g: &mut Graph, gauss: &GaussianNodes, eps: &[f32]) -> Result<TensorId> {
    let half = g.scale(gauss.log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let eps_node = g.constant(Tensor::new(vec![eps.len()], eps.to_vec())?)?;
    let noise = g.mul(sigma, eps_node)?;
    g.add(gauss.mu, noise)
}

/// KL(q ‖ p) between diagonal Gaussians, as a graph node:
/// Σ_i ½(logσ²_p − logσ²_q) + (σ²_q + (μ_q−μ_p)²) / (2σ²_p) − ½.
pub fn kl_nodes(g: &mut Graph, q: &GaussianNodes, p: &GaussianNodes) -> Result<TensorId> {
    let d = g.value(q.mu).numel();
    if g.value(p.mu).numel() != d {
        return Err(Error::ShapeMismatch {
            op: "kl_closed_form",
            detail: format!("q dim {d} vs p dim {}", g.value(p.mu).numel()),
        });
    }
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let half_log = g.scale(log_ratio, 0.5)?;
    let var_q = g.exp(q.log_var)?;
    let mu_diff = g.sub(q.mu, p.mu)?;
    let mu_sq = g.mul(mu_diff, mu_diff)?;
    let num = g.add(var_q, mu_sq)?;
    let neg_logvar_p = g.scale(p.log_var, -1.0)?;
    let inv_var_p = g.exp(neg_logvar_p)?;
    let ratio = g.mul(num, inv_var_p)?;
    let half_ratio = g.scale(ratio, 0.5)?;
    let terms = g.add(half_log, half_ratio)?;
    let shifted = g.add_const(terms, -0.5)?;
    g.sum(shifted)
}

/// Closed-form KL on plain values.
pub fn kl_closed_form(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    if q.mu.len() != p.mu.len() {
        return Err(Error::ShapeMismatch {
            op: "kl_closed_form",
            detail: format!("q dim {} vs p dim {}", q.mu.len(), p.mu.len()),
        });
    }
    let mut kl = 0.0f64;
    for i in 0..q.mu.len() {
        let (lq, lp) = (q.log_var[i] as f64, p.log_var[i] as f64);
        let (mq, mp) = (q.mu[i] as f64, p.mu[i] as f64);
        kl += 0.5 * (lp - lq) + (lq.exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5;
    }
    Ok(kl)
}

/// Test-time latent: the mean of the prior, no randomness.
pub fn infer_latent(
    g: &mut Graph,
    binder: &mut Binder,
    ps: &ParamSet,
    h_cls: TensorId,
) -> Result<TensorId> {
    Ok(prior_params(g, binder, ps, h_cls)?.mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorgrad::{check_graph, grad_check};

    const DIMS: SemanticDims = SemanticDims { d: 6, d_label: 4, d_z: 3 };

    fn setup(seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut rng = Rng::seeded(seed);
        init_params(&mut ps, &DIMS, &mut rng).unwrap();
        ps
    }

    fn zero_head(ps: &mut ParamSet, prefix: &str) {
        for suffix in ["wz", "bz", "wmu", "bmu", "wsigma", "bsigma"] {
            let p = ps.get_mut(&format!("semantic.{prefix}.{suffix}")).unwrap();
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_weights_give_standard_normal() {
        let mut ps = setup(1);
        zero_head(&mut ps, "post");
        let mut g = Graph::new();
        let mut b = Binder::new();
        let h = g.constant(Tensor::new(vec![6], vec![0.4; 6]).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![4], vec![-0.2; 4]).unwrap()).unwrap();
        let q = posterior_params(&mut g, &mut b, &ps, h, y).unwrap().values(&g);
        assert_eq!(q.mu, vec![0.0; 3]);
        assert_eq!(q.log_var, vec![0.0; 3]);
    }

    #[test]
    fn output_dims_are_latent_dims() {
        let ps = setup(2);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let h = g.constant(Tensor::new(vec![6], vec![0.1; 6]).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![4], vec![0.7; 4]).unwrap()).unwrap();
        let q = posterior_params(&mut g, &mut b, &ps, h, y).unwrap();
        assert_eq!(g.value(q.mu).shape, vec![3]);
        assert_eq!(g.value(q.log_var).shape, vec![3]);
        let p = prior_params(&mut g, &mut b, &ps, h).unwrap();
        assert_eq!(g.value(p.mu).shape, vec![3]);
    }

    #[test]
    fn prior_is_deterministic() {
        let ps = setup(3);
        let run = || {
            let mut g = Graph::new();
            let mut b = Binder::new();
            let h = g.constant(Tensor::new(vec![6], vec![0.3; 6]).unwrap()).unwrap();
            prior_params(&mut g, &mut b, &ps, h).unwrap().values(&g)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn reparameterize_trivial_cases() {
        let mut g = Graph::new();
        let mu = g.constant(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let lv = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        let gauss = GaussianNodes { mu, log_var: lv };
        let z = reparameterize_with(&mut g, &gauss, &[0.0, 0.0]).unwrap();
        assert_eq!(g.value(z).data, vec![1.0, 2.0]);

        let mu = g.constant(Tensor::new(vec![1], vec![0.0]).unwrap()).unwrap();
        let lv = g.constant(Tensor::new(vec![1], vec![4.0f32.ln()]).unwrap()).unwrap();
        let z = reparameterize_with(&mut g, &GaussianNodes { mu, log_var: lv }, &[0.5]).unwrap();
        assert!((g.value(z).data[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_identical_distributions_is_zero() {
        let q = GaussianParams { mu: vec![0.3, -1.2], log_var: vec![0.5, -0.7] };
        assert!(kl_closed_form(&q, &q).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_unit_mu_shift_is_half() {
        let q = GaussianParams { mu: vec![1.0], log_var: vec![0.0] };
        let p = GaussianParams { mu: vec![0.0], log_var: vec![0.0] };
        assert!((kl_closed_form(&q, &p).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn kl_dimension_mismatch_errors() {
        let q = GaussianParams { mu: vec![0.0; 2], log_var: vec![0.0; 2] };
        let p = GaussianParams { mu: vec![0.0; 3], log_var: vec![0.0; 3] };
        assert!(kl_closed_form(&q, &p).is_err());
    }

    #[test]
    fn kl_graph_matches_closed_form() {
        let mut g = Graph::new();
        let mk = |g: &mut Graph, mu: Vec<f32>, lv: Vec<f32>| {
            let n = mu.len();
            GaussianNodes {
                mu: g.constant(Tensor::new(vec![n], mu).unwrap()).unwrap(),
                log_var: g.constant(Tensor::new(vec![n], lv).unwrap()).unwrap(),
            }
        };
        let q = mk(&mut g, vec![0.3, -0.4], vec![0.2, 0.9]);
        let p = mk(&mut g, vec![-0.1, 0.6], vec![-0.5, 0.1]);
        let node = kl_nodes(&mut g, &q, &p).unwrap();
        let direct = kl_closed_form(&q.values(&g), &p.values(&g)).unwrap();
        assert!((g.scalar_value(node) as f64 - direct).abs() < 1e-5);
        assert!(direct >= 0.0);
    }

    #[test]
    fn kl_gradient_wrt_posterior_head_matches_finite_differences() {
        let ps = setup(4);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let h = g.constant(Tensor::new(vec![6], vec![0.2, -0.3, 0.5, 0.1, -0.8, 0.4]).unwrap()).unwrap();
        let y = g.constant(Tensor::new(vec![4], vec![0.6, -0.1, 0.2, 0.3]).unwrap()).unwrap();
        let q = posterior_params(&mut g, &mut b, &ps, h, y).unwrap();
        let p = prior_params(&mut g, &mut b, &ps, h).unwrap();
        let kl = kl_nodes(&mut g, &q, &p).unwrap();
        let leaves = b.bound_ids();
        let err = check_graph(&mut g, kl, &leaves, 1e-3).unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn reparameterize_gradients_match_finite_differences() {
        // grads w.r.t. mu and log_var with eps held fixed
        let eps = [0.7f32, -1.1, 0.3];
        let x = Tensor::new(vec![6], vec![0.5, -0.2, 0.8, 0.1, -0.6, 0.9]).unwrap();
        let err = grad_check(
            |g, xid| {
                let mu = g.slice_last(xid, 0, 3)?;
                let lv = g.slice_last(xid, 3, 3)?;
                let z = reparameterize_with(g, &GaussianNodes { mu, log_var: lv }, &eps)?;
                let sq = g.mul(z, z)?;
                g.sum(sq)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "max rel err {err}");
    }

    #[test]
    fn infer_latent_is_prior_mean_and_posterior_path_with_eps_zero() {
        let ps = setup(5);
        let mut g = Graph::new();
        let mut b = Binder::new();
        let h = g.constant(Tensor::new(vec![6], vec![0.2; 6]).unwrap()).unwrap();
        let z = infer_latent(&mut g, &mut b, &ps, h).unwrap();
        let p = prior_params(&mut g, &mut b, &ps, h).unwrap();
        let z0 = reparameterize_with(&mut g, &p, &[0.0; 3]).unwrap();
        assert_eq!(g.value(z).data, g.value(z0).data);
    }

    #[test]
    fn sample_statistics_match_parameters() {
        let mut rng = Rng::seeded(99);
        let mu = [1.0f32, 2.0];
        let var = [1.0f32, 4.0];
        let n = 10_000;
        let mut sums = [0.0f64; 2];
        let mut sqs = [0.0f64; 2];
        for _ in 0..n {
            let mut g = Graph::new();
            let m = g.constant(Tensor::new(vec![2], mu.to_vec()).unwrap()).unwrap();
            let lv = g
                .constant(Tensor::new(vec![2], var.iter().map(|v| v.ln()).collect()).unwrap())
                .unwrap();
            let (z, _) = reparameterize(&mut g, &GaussianNodes { mu: m, log_var: lv }, &mut rng).unwrap();
            for i in 0..2 {
                let v = g.value(z).data[i] as f64;
                sums[i] += v;
                sqs[i] += v * v;
            }
        }
        for i in 0..2 {
            let mean = sums[i] / n as f64;
            let var_hat = sqs[i] / n as f64 - mean * mean;
            let se_mean = (var[i] as f64 / n as f64).sqrt();
            let se_var = var[i] as f64 * (2.0 / n as f64).sqrt();
            assert!((mean - mu[i] as f64).abs() < 3.0 * se_mean, "mean[{i}] {mean}");
            assert!((var_hat - var[i] as f64).abs() < 3.0 * se_var, "var[{i}] {var_hat}");
        }
    }
}
