//! Training objective: in-domain self-matching (ISS) against detached
//! memory soft labels, cross-domain classifier alignment (CCA), their
//! λ-weighted sum per clustering run, and the average over runs.
//!
//! All gradients are analytic. Memory rows and the soft labels computed from
//! them are constants; the classifier receives gradient only through the
//! prediction branch.

use crate::clustering::ClusterRun;
use crate::dataset::Domain;
use crate::error::{Error, Result};
use crate::numerics::{log_softmax, softmax, Matrix};

/// Bias-free linear classifiers `g_A`, `g_B` of one clustering run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierPair {
    pub w_a: Matrix,
    pub w_b: Matrix,
}

impl ClassifierPair {
    pub fn new(w_a: Matrix, w_b: Matrix) -> Result<Self> {
        if w_a.rows() != w_b.rows() || w_a.cols() != w_b.cols() || w_a.rows() == 0 {
            return Err(Error::invalid(format!(
                "classifier shapes differ: {}x{} vs {}x{}",
                w_a.rows(),
                w_a.cols(),
                w_b.rows(),
                w_b.cols()
            )));
        }
        if !w_a.is_finite() || !w_b.is_finite() {
            return Err(Error::invalid("classifier weights must be finite"));
        }
        Ok(ClassifierPair { w_a, w_b })
    }

    pub fn k(&self) -> usize {
        self.w_a.rows()
    }

    pub fn dim(&self) -> usize {
        self.w_a.cols()
    }

    pub fn weights(&self, domain: Domain) -> &Matrix {
        match domain {
            Domain::A => &self.w_a,
            Domain::B => &self.w_b,
        }
    }

    pub fn weights_mut(&mut self, domain: Domain) -> &mut Matrix {
        match domain {
            Domain::A => &mut self.w_a,
            Domain::B => &mut self.w_b,
        }
    }

    /// Smallest `|g_A(v)_c − g_B(v)_c|` over the given features.
    pub fn min_logit_gap(&self, features: &[Vec<f64>]) -> f64 {
        features
            .iter()
            .flat_map(|v| {
                let a = self.w_a.matvec(v);
                let b = self.w_b.matvec(v);
                a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<_>>()
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// One classifier pair per run, copied row-for-row from the domain centroids.
pub fn init_classifiers(runs: &[ClusterRun], embed_dim: usize) -> Result<Vec<ClassifierPair>> {
    runs.iter()
        .map(|run| {
            if run.centroids_a.cols() != embed_dim || run.centroids_a.rows() != run.k {
                return Err(Error::invalid(format!(
                    "run with k = {} has centroids {}x{}, expected {}x{embed_dim}",
                    run.k,
                    run.centroids_a.rows(),
                    run.centroids_a.cols(),
                    run.k
                )));
            }
            ClassifierPair::new(run.centroids_a.clone(), run.centroids_b.clone())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct IssOutput {
    pub loss: f64,
    pub grad_w: Matrix,
    pub grad_v: Vec<Vec<f64>>,
}

/// Detached soft labels `σ(W m_i / τ)`, one per memory row.
pub fn soft_labels(w: &Matrix, memory: &Matrix, tau: f64) -> Result<Vec<Vec<f64>>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if memory.cols() != w.cols() {
        return Err(Error::invalid("memory width does not match classifier"));
    }
    memory
        .row_iter()
        .map(|m| {
            let logits: Vec<f64> = w.matvec(m).iter().map(|z| z / tau).collect();
            softmax(&logits)
        })
        .collect()
}

/// `mean_i H(σ(W m_i / τ), σ(W v_i))` for one domain's classifier.
pub fn iss_loss(w: &Matrix, features: &[Vec<f64>], memory: &Matrix, tau: f64) -> Result<IssOutput> {
    if features.len() != memory.rows() {
        return Err(Error::invalid(format!(
            "ISS needs one memory row per feature ({} features, {} rows)",
            features.len(),
            memory.rows()
        )));
    }
    iss_loss_with_targets(w, features, &soft_labels(w, memory, tau)?)
}

/// ISS against precomputed targets. The prediction's log-probabilities come
/// from a log-softmax, so `∂/∂z = q − p` holds exactly.
pub fn iss_loss_with_targets(w: &Matrix, features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<IssOutput> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::invalid(format!(
            "ISS needs one target per feature ({} features, {} targets)",
            features.len(),
            targets.len()
        )));
    }
    let inv_n = 1.0 / features.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = Matrix::zeros(w.rows(), w.cols());
    let mut grad_v = Vec::with_capacity(features.len());
    for (v, p) in features.iter().zip(targets) {
        if v.len() != w.cols() || p.len() != w.rows() {
            return Err(Error::invalid("feature or target width does not match classifier"));
        }
        let log_q = log_softmax(&w.matvec(v))?;
        loss -= p.iter().zip(&log_q).map(|(pc, lq)| pc * lq).sum::<f64>();
        let dz: Vec<f64> = log_q.iter().zip(p).map(|(lq, pc)| (lq.exp() - pc) * inv_n).collect();
        grad_w.add_outer(1.0, &dz, v);
        grad_v.push(w.matvec_t(&dz));
    }
    Ok(IssOutput {
        loss: loss * inv_n,
        grad_w,
        grad_v,
    })
}

/// How the per-sample CCA term reduces the k logit differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossReduction {
    Mean,
    Sum,
}

impl std::str::FromStr for CrossReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(CrossReduction::Mean),
            "sum" => Ok(CrossReduction::Sum),
            _ => Err(Error::Config(format!("reduction must be mean or sum, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for CrossReduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrossReduction::Mean => "mean",
            CrossReduction::Sum => "sum",
        })
    }
}

#[derive(Debug, Clone)]
pub struct CcaOutput {
    pub loss_a: f64,
    pub loss_b: f64,
    pub grad_w_a: Matrix,
    pub grad_w_b: Matrix,
    pub grad_v_a: Vec<Vec<f64>>,
    pub grad_v_b: Vec<Vec<f64>>,
}

impl CcaOutput {
    pub fn loss(&self) -> f64 {
        self.loss_a + self.loss_b
    }
}

/// Batch mean of `reduce_c |g_A(v)_c − g_B(v)_c|`, accumulating gradients.
/// The subgradient of `|·|` at zero is 0.
fn cca_one_side(pair: &ClassifierPair, features: &[Vec<f64>], reduction: CrossReduction, grad_w_a: &mut Matrix, grad_w_b: &mut Matrix) -> Result<(f64, Vec<Vec<f64>>)> {
    if features.is_empty() {
        return Err(Error::invalid("CCA batch is empty"));
    }
    let k = pair.k();
    let per_dim = match reduction {
        CrossReduction::Mean => 1.0 / k as f64,
        CrossReduction::Sum => 1.0,
    };
    let scale = per_dim / features.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(features.len());
    for v in features {
        if v.len() != pair.dim() {
            return Err(Error::invalid("feature width does not match classifier"));
        }
        let a = pair.w_a.matvec(v);
        let b = pair.w_b.matvec(v);
        let mut s = vec![0.0; k];
        for c in 0..k {
            let d = a[c] - b[c];
            loss += d.abs();
            s[c] = if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            };
        }
        grad_w_a.add_outer(1.0, &s, v);
        grad_w_b.add_outer(-1.0, &s, v);
        let mut gv = pair.w_a.matvec_t(&s);
        for (g, x) in gv.iter_mut().zip(pair.w_b.matvec_t(&s)) {
            *g -= x;
        }
        grads.push(gv);
    }
    Ok((loss * scale, grads))
}

pub fn cca_loss(pair: &ClassifierPair, features_a: &[Vec<f64>], features_b: &[Vec<f64>], reduction: CrossReduction) -> Result<CcaOutput> {
    let mut grad_w_a = Matrix::zeros(pair.k(), pair.dim());
    let mut grad_w_b = Matrix::zeros(pair.k(), pair.dim());
    let (loss_a, grad_v_a) = cca_one_side(pair, features_a, reduction, &mut grad_w_a, &mut grad_w_b)?;
    let (loss_b, grad_v_b) = cca_one_side(pair, features_b, reduction, &mut grad_w_a, &mut grad_w_b)?;
    Ok(CcaOutput {
        loss_a,
        loss_b,
        grad_w_a,
        grad_w_b,
        grad_v_a,
        grad_v_b,
    })
}

/// Which terms enter the objective. `IssOnly` and `CcaOnly` are the two
/// ablations; `CcaOnly` keeps the λ weight on the alignment term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossVariant {
    Full,
    IssOnly,
    CcaOnly,
}

impl LossVariant {
    fn weights(self, lambda: f64) -> (f64, f64) {
        match self {
            LossVariant::Full => (1.0, lambda),
            LossVariant::IssOnly => (1.0, 0.0),
            LossVariant::CcaOnly => (0.0, lambda),
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(LossVariant::Full),
            "iss" | "iss-only" => Ok(LossVariant::IssOnly),
            "cca" | "cca-only" => Ok(LossVariant::CcaOnly),
            _ => Err(Error::Config(format!("variant must be full, iss or cca, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossVariant::Full => "full",
            LossVariant::IssOnly => "iss",
            LossVariant::CcaOnly => "cca",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub tau: f64,
    pub reduction: CrossReduction,
    pub variant: LossVariant,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.01,
            tau: 0.01,
            reduction: CrossReduction::Mean,
            variant: LossVariant::Full,
        }
    }
}

/// Features of one paired mini-batch and the matching detached memory rows.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub features_a: &'a [Vec<f64>],
    pub features_b: &'a [Vec<f64>],
    pub memory_a: &'a Matrix,
    pub memory_b: &'a Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunLoss {
    pub k: usize,
    pub in_a: f64,
    pub in_b: f64,
    pub cross_a: f64,
    pub cross_b: f64,
    /// `w_in · (in_a + in_b) + w_cross · (cross_a + cross_b)`.
    pub join: f64,
}

impl RunLoss {
    pub fn l_in(&self) -> f64 {
        self.in_a + self.in_b
    }

    pub fn l_cross(&self) -> f64 {
        self.cross_a + self.cross_b
    }
}

/// Loss values and gradients of the run-averaged objective.
#[derive(Debug, Clone)]
pub struct LossReport {
    /// Mean over runs of `L_in`.
    pub l_in: f64,
    /// Mean over runs of `L_cross`.
    pub l_cross: f64,
    /// Weighted contribution of the alignment term to `total`.
    pub weighted_cross: f64,
    /// `(1/R) Σ_r L_join^(r)`.
    pub total: f64,
    pub per_run: Vec<RunLoss>,
    pub grad_v_a: Vec<Vec<f64>>,
    pub grad_v_b: Vec<Vec<f64>>,
    /// `(∂/∂W_A, ∂/∂W_B)` per run, including the `1/R` factor.
    pub grad_w: Vec<(Matrix, Matrix)>,
}

fn accumulate(dst: &mut [Vec<f64>], src: &[Vec<f64>], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        for (x, y) in d.iter_mut().zip(s) {
            *x += scale * y;
        }
    }
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    let mut out = m.clone();
    for x in out.as_mut_slice() {
        *x *= s;
    }
    out
}

/// Soft labels of every run for both domains: `(targets_A, targets_B)`.
pub type RunTargets = Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>;

pub fn soft_targets(pairs: &[ClassifierPair], batch: BatchView<'_>, tau: f64) -> Result<RunTargets> {
    pairs
        .iter()
        .map(|p| Ok((soft_labels(&p.w_a, batch.memory_a, tau)?, soft_labels(&p.w_b, batch.memory_b, tau)?)))
        .collect()
}

pub fn joint_loss(pairs: &[ClassifierPair], batch: BatchView<'_>, cfg: &ObjectiveConfig) -> Result<LossReport> {
    if batch.features_a.len() != batch.memory_a.rows() || batch.features_b.len() != batch.memory_b.rows() {
        return Err(Error::invalid("batch features and memory rows are not aligned"));
    }
    let targets = soft_targets(pairs, batch, cfg.tau)?;
    joint_loss_with_targets(pairs, batch.features_a, batch.features_b, &targets, cfg)
}

/// Joint objective against fixed soft labels (see [`soft_targets`]).
pub fn joint_loss_with_targets(
    pairs: &[ClassifierPair],
    features_a: &[Vec<f64>],
    features_b: &[Vec<f64>],
    targets: &RunTargets,
    cfg: &ObjectiveConfig,
) -> Result<LossReport> {
    if targets.len() != pairs.len() {
        return Err(Error::invalid("one set of soft labels per run is required"));
    }
    if pairs.is_empty() {
        return Err(Error::invalid("joint loss needs at least one classifier pair"));
    }
    if !(cfg.lambda >= 0.0 && cfg.lambda.is_finite()) {
        return Err(Error::invalid(format!("λ must be non-negative, got {}", cfg.lambda)));
    }
    let (w_in, w_cross) = cfg.variant.weights(cfg.lambda);
    let inv_r = 1.0 / pairs.len() as f64;
    let dim = pairs[0].dim();
    let mut grad_v_a = vec![vec![0.0; dim]; features_a.len()];
    let mut grad_v_b = vec![vec![0.0; dim]; features_b.len()];
    let mut per_run = Vec::with_capacity(pairs.len());
    let mut grad_w = Vec::with_capacity(pairs.len());

    for (pair, (t_a, t_b)) in pairs.iter().zip(targets) {
        let iss_a = iss_loss_with_targets(&pair.w_a, features_a, t_a)?;
        let iss_b = iss_loss_with_targets(&pair.w_b, features_b, t_b)?;
        let cca = cca_loss(pair, features_a, features_b, cfg.reduction)?;

        let run = RunLoss {
            k: pair.k(),
            in_a: iss_a.loss,
            in_b: iss_b.loss,
            cross_a: cca.loss_a,
            cross_b: cca.loss_b,
            join: w_in * (iss_a.loss + iss_b.loss) + w_cross * cca.loss(),
        };
        per_run.push(run);

        accumulate(&mut grad_v_a, &iss_a.grad_v, w_in * inv_r);
        accumulate(&mut grad_v_a, &cca.grad_v_a, w_cross * inv_r);
        accumulate(&mut grad_v_b, &iss_b.grad_v, w_in * inv_r);
        accumulate(&mut grad_v_b, &cca.grad_v_b, w_cross * inv_r);

        let mut ga = scaled(&iss_a.grad_w, w_in * inv_r);
        let mut gb = scaled(&iss_b.grad_w, w_in * inv_r);
        for (g, c) in ga.as_mut_slice().iter_mut().zip(cca.grad_w_a.as_slice()) {
            *g += w_cross * inv_r * c;
        }
        for (g, c) in gb.as_mut_slice().iter_mut().zip(cca.grad_w_b.as_slice()) {
            *g += w_cross * inv_r * c;
        }
        grad_w.push((ga, gb));
    }

    let l_in = per_run.iter().map(RunLoss::l_in).sum::<f64>() * inv_r;
    let l_cross = per_run.iter().map(RunLoss::l_cross).sum::<f64>() * inv_r;
    let total = per_run.iter().map(|r| r.join).sum::<f64>() * inv_r;
    Ok(LossReport {
        l_in,
        l_cross,
        weighted_cross: w_cross * l_cross,
        total,
        per_run,
        grad_v_a,
        grad_v_b,
        grad_w,
    })
}
