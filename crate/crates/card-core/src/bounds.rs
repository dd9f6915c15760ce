//! Wasserstein-bound machinery: Lipschitz-constant handling, the Gronwall
//! factor M(t), score-gap and loss estimation, the two bound right-hand
//! sides, the log-log relation they induce, and per-checkpoint reports.
//!
//! Continuous time runs over [0, 1] with the rescaled rate beta(t); the
//! drift constant is l1(t) = beta(t)/2 and l2(t) is an empirical one-sided
//! Lipschitz estimate of the score network, held fixed across the
//! quadrature grid. Both bound forms,
//!
//!   integral form:  int beta M sqrt(H) dt + M(1) W2_T
//!   loss form:      sqrt( 2 (int beta^2 M^2 / lambda dt) L1 ) + M(1) W2_T
//!
//! are evaluated with one shared set of node weights so the Cauchy-Schwarz
//! ordering between them holds exactly in floating point.

use std::io::Write as IoWrite;

use crate::datasets::LabeledSample;
use crate::diffusion::{
    forward_marginal_sample, forward_mean, reverse_chain, CardModel, NoiseSchedule,
};
use crate::error::{Error, Result};
use crate::rng::DetRng;
use crate::transport::{w2_exact, EmpiricalMeasure};

/// l1(t) = beta(t)/2 analytic plus a per-checkpoint one-sided Lipschitz
/// estimate of the score field, on a uniform grid over [0, 1].
#[derive(Debug, Clone)]
pub struct LipschitzEstimates {
    /// beta at the n+1 uniform nodes k/n, k = 0..=n.
    beta: Vec<f64>,
    /// l2 at the same nodes (constant unless the caller varies it).
    l2: Vec<f64>,
    pub l2_max: f64,
}

impl LipschitzEstimates {
    pub fn from_schedule(
        schedule: &NoiseSchedule,
        l2_value: f64,
        grid_points: usize,
        l2_max: f64,
    ) -> Self {
        let n = grid_points.max(2);
        let l2 = l2_value.clamp(-l2_max, l2_max);
        Self {
            beta: (0..=n)
                .map(|k| schedule.beta_cont(k as f64 / n as f64))
                .collect(),
            l2: vec![l2; n + 1],
            l2_max,
        }
    }

    pub fn constant_rate(beta_bar: f64, l2_value: f64, grid_points: usize, l2_max: f64) -> Self {
        let n = grid_points.max(2);
        Self {
            beta: vec![beta_bar; n + 1],
            l2: vec![l2_value.clamp(-l2_max, l2_max); n + 1],
            l2_max,
        }
    }

    fn nodes(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta_at(&self, t: f64) -> f64 {
        interp(&self.beta, t)
    }

    pub fn l1_at(&self, t: f64) -> f64 {
        self.beta_at(t) / 2.0
    }

    pub fn l2_at(&self, t: f64) -> f64 {
        interp(&self.l2, t)
    }

    /// M(t) = exp( int_0^t (l1 + l2 beta) ds ), trapezoid on the node grid.
    pub fn m_factor(&self, t: f64) -> f64 {
        let n = self.nodes();
        let h = 1.0 / n as f64;
        let t = t.clamp(0.0, 1.0);
        let integrand = |k: usize| -> f64 {
            let b = self.beta[k];
            b / 2.0 + self.l2[k] * b
        };
        let mut acc = 0.0;
        let full = ((t / h).floor() as usize).min(n);
        for k in 0..full {
            acc += 0.5 * (integrand(k) + integrand(k + 1)) * h;
        }
        let rem = t - full as f64 * h;
        if rem > 0.0 && full < n {
            let a = integrand(full);
            let b_next = integrand(full + 1);
            let frac = rem / h;
            let end_val = a + (b_next - a) * frac;
            acc += 0.5 * (a + end_val) * rem;
        }
        acc.exp()
    }

    /// int_0^1 beta(t) M(t)^2 dt on the node grid (the lambda = beta case).
    pub fn integral_beta_m2(&self) -> f64 {
        let n = self.nodes();
        let h = 1.0 / n as f64;
        let mut acc = 0.0;
        let mut prev = self.beta[0]; // M(0) = 1
        for k in 1..=n {
            let t = k as f64 * h;
            let m = self.m_factor(t);
            let cur = self.beta[k] * m * m;
            acc += 0.5 * (prev + cur) * h;
            prev = cur;
        }
        acc
    }
}

fn interp(values: &[f64], t: f64) -> f64 {
    let n = values.len() - 1;
    let pos = (t.clamp(0.0, 1.0)) * n as f64;
    let k = (pos.floor() as usize).min(n - 1);
    let frac = pos - k as f64;
    values[k] * (1.0 - frac) + values[k + 1] * frac
}

/// Weight function choice for the score-matching loss.
pub enum Lambda {
    /// lambda(t) = beta(t).
    Beta,
    /// Any strictly positive weight.
    Custom(Box<dyn Fn(f64) -> f64>),
}

impl Lambda {
    fn at(&self, beta: f64, t: f64) -> Result<f64> {
        let v = match self {
            Lambda::Beta => beta,
            Lambda::Custom(f) => f(t),
        };
        if v <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "lambda(t) must be positive, got {v} at t = {t}"
            )));
        }
        Ok(v)
    }
}

/// Everything the score-gap estimator can see about one forward draw.
#[derive(Debug, Clone, Copy)]
pub struct ScoreQuery {
    pub y_t: [f64; 2],
    pub f: [f64; 2],
    pub y0: [f64; 2],
    pub t: usize,
    pub t_frac: f64,
}

/// Monte-Carlo mean of || s(y_t) - conditional score ||^2 at step t, with
/// the conditional score -eps / sigma_t of the closed-form forward kernel.
/// `pairs` supplies (y0, f) couples to diffuse (cycled round-robin).
pub fn score_gap_surrogate<S>(
    schedule: &NoiseSchedule,
    pairs: &[([f64; 2], [f64; 2])],
    score: S,
    t: usize,
    n_mc: usize,
    rng: &mut DetRng,
) -> Result<f64>
where
    S: Fn(&ScoreQuery) -> Result<[f64; 2]>,
{
    if pairs.is_empty() || n_mc == 0 {
        return Err(Error::InvalidParameter("empty score-gap input".into()));
    }
    let sd = (1.0 - schedule.alpha_bar_t(t)).sqrt();
    let t_frac = t as f64 / schedule.steps as f64;
    let mut acc = 0.0;
    for i in 0..n_mc {
        let (y0, f) = pairs[i % pairs.len()];
        let (y_t, eps) = forward_marginal_sample(schedule, &y0, &f, t, rng)?;
        let s_hat = score(&ScoreQuery {
            y_t,
            f,
            y0,
            t,
            t_frac,
        })?;
        let g0 = s_hat[0] + eps[0] / sd;
        let g1 = s_hat[1] + eps[1] / sd;
        acc += g0 * g0 + g1 * g1;
    }
    Ok(acc / n_mc as f64)
}

/// Exact-marginal variant for isotropic Gaussian data y0 ~ N(mean, var I):
/// the diffused marginal is Gaussian with closed-form score, so the gap to
/// the true marginal score is directly estimable.
pub fn score_gap_exact_gaussian<S>(
    schedule: &NoiseSchedule,
    data_mean: [f64; 2],
    data_var: f64,
    f: [f64; 2],
    score: S,
    t: usize,
    n_mc: usize,
    rng: &mut DetRng,
) -> Result<f64>
where
    S: Fn(&ScoreQuery) -> Result<[f64; 2]>,
{
    let ab = schedule.alpha_bar_t(t);
    let root_ab = ab.sqrt();
    let mu = [
        root_ab * data_mean[0] + (1.0 - root_ab) * f[0],
        root_ab * data_mean[1] + (1.0 - root_ab) * f[1],
    ];
    let v_t = ab * data_var + (1.0 - ab);
    let t_frac = t as f64 / schedule.steps as f64;
    let mut acc = 0.0;
    for _ in 0..n_mc {
        let z = rng.normal_pair();
        let y_t = [mu[0] + v_t.sqrt() * z[0], mu[1] + v_t.sqrt() * z[1]];
        let s_hat = score(&ScoreQuery {
            y_t,
            f,
            y0: data_mean,
            t,
            t_frac,
        })?;
        let g0 = s_hat[0] + (y_t[0] - mu[0]) / v_t;
        let g1 = s_hat[1] + (y_t[1] - mu[1]) / v_t;
        acc += g0 * g0 + g1 * g1;
    }
    Ok(acc / n_mc as f64)
}

/// Max over sampled pairs of [s(y1) - s(y2)] . (y1 - y2) / ||y1 - y2||^2,
/// clamped to [-l2_max, l2_max]. Coincident pairs are redrawn.
pub fn estimate_l2<S, D>(
    mut draw: D,
    score: S,
    n_pairs: usize,
    l2_max: f64,
    rng: &mut DetRng,
) -> Result<f64>
where
    S: Fn(&[f64; 2]) -> Result<[f64; 2]>,
    D: FnMut(&mut DetRng) -> Result<([f64; 2], [f64; 2])>,
{
    if n_pairs == 0 {
        return Err(Error::InvalidParameter("n_pairs must be >= 1".into()));
    }
    let mut best = f64::NEG_INFINITY;
    let mut taken = 0;
    let mut attempts = 0;
    while taken < n_pairs {
        attempts += 1;
        if attempts > 20 * n_pairs {
            return Err(Error::NotConverged {
                iters: attempts,
                residual: f64::NAN,
            });
        }
        let (y1, y2) = draw(rng)?;
        let d = [y1[0] - y2[0], y1[1] - y2[1]];
        let norm_sq = d[0] * d[0] + d[1] * d[1];
        if norm_sq < 1e-24 {
            continue;
        }
        let s1 = score(&y1)?;
        let s2 = score(&y2)?;
        let ratio = ((s1[0] - s2[0]) * d[0] + (s1[1] - s2[1]) * d[1]) / norm_sq;
        best = best.max(ratio);
        taken += 1;
    }
    Ok(best.clamp(-l2_max, l2_max))
}

/// l2 estimate for a CARD model at step t: pairs are same-class data points
/// pushed through the forward marginal, so the score is probed on its own
/// input distribution at fixed f.
pub fn estimate_l2_model(
    model: &CardModel,
    samples: &[LabeledSample],
    t: usize,
    n_pairs: usize,
    l2_max: f64,
    rng: &mut DetRng,
) -> Result<f64> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); model.n_classes];
    for (i, s) in samples.iter().enumerate() {
        by_class[s.x].push(i);
    }
    let classes: Vec<usize> = (0..model.n_classes)
        .filter(|&k| by_class[k].len() >= 2)
        .collect();
    if classes.is_empty() {
        return Err(Error::InvalidParameter(
            "need at least two samples in some class".into(),
        ));
    }
    let mut f_by_class = Vec::with_capacity(model.n_classes);
    for k in 0..model.n_classes {
        f_by_class.push(model.f_of_class(k)?);
    }
    let schedule = model.schedule.clone();
    let pick = std::cell::Cell::new(0usize);
    // The score closure must see the class of the current pair; stash it.
    let current_class = std::cell::Cell::new(classes[0]);
    let draw = |rng: &mut DetRng| -> Result<([f64; 2], [f64; 2])> {
        let k = classes[pick.get() % classes.len()];
        pick.set(pick.get() + 1);
        current_class.set(k);
        let idxs = &by_class[k];
        let a = idxs[rng.index(idxs.len())];
        let b = idxs[rng.index(idxs.len())];
        let f = f_by_class[k];
        let (y1, _) = forward_marginal_sample(&schedule, &samples[a].y0, &f, t, rng)?;
        let (y2, _) = forward_marginal_sample(&schedule, &samples[b].y0, &f, t, rng)?;
        Ok((y1, y2))
    };
    let score = |y: &[f64; 2]| -> Result<[f64; 2]> {
        let f = f_by_class[current_class.get()];
        model.score_at(y, &f, t)
    };
    estimate_l2(draw, score, n_pairs, l2_max, rng)
}

/// Shared quadrature weights over the step nodes t_k = k/T: trapezoid on
/// [1/T, 1] plus a rectangle on [0, 1/T] carried by the first node. The
/// weights sum to 1.
fn step_weights(t_max: usize) -> Vec<f64> {
    let tf = t_max as f64;
    let mut w = vec![1.0 / tf; t_max];
    if t_max > 1 {
        w[0] = 1.5 / tf;
        w[t_max - 1] = 0.5 / tf;
    } else {
        w[0] = 1.0;
    }
    w
}

/// (1/2) int lambda(t) H(t) dt with H given at the step nodes.
pub fn loss_l1_hat(
    schedule: &NoiseSchedule,
    est: &LipschitzEstimates,
    h_at_steps: &[f64],
    lambda: &Lambda,
) -> Result<f64> {
    let t_max = schedule.steps;
    if h_at_steps.len() != t_max {
        return Err(Error::DimensionMismatch {
            expected: t_max,
            got: h_at_steps.len(),
            context: "H values per step",
        });
    }
    let w = step_weights(t_max);
    let mut acc = 0.0;
    for k in 1..=t_max {
        let t = k as f64 / t_max as f64;
        let beta = est.beta_at(t);
        acc += w[k - 1] * lambda.at(beta, t)? * h_at_steps[k - 1];
    }
    Ok(0.5 * acc)
}

/// Integral-form bound: int beta M sqrt(H) dt + M(1) W2_T.
pub fn theorem1_rhs(
    schedule: &NoiseSchedule,
    est: &LipschitzEstimates,
    h_at_steps: &[f64],
    w2_terminal: f64,
) -> Result<f64> {
    let t_max = schedule.steps;
    if h_at_steps.len() != t_max {
        return Err(Error::DimensionMismatch {
            expected: t_max,
            got: h_at_steps.len(),
            context: "H values per step",
        });
    }
    let w = step_weights(t_max);
    let mut acc = 0.0;
    for k in 1..=t_max {
        let t = k as f64 / t_max as f64;
        acc += w[k - 1] * est.beta_at(t) * est.m_factor(t) * h_at_steps[k - 1].max(0.0).sqrt();
    }
    Ok(acc + est.m_factor(1.0) * w2_terminal)
}

/// Loss-form bound: sqrt( 2 (int beta^2 M^2 / lambda dt) L1 ) + M(1) W2_T,
/// evaluated with the same node weights as `theorem1_rhs` and `loss_l1_hat`
/// so the Cauchy-Schwarz ordering rhs_thm1 <= rhs_cor1 is exact.
pub fn corollary1_rhs(
    schedule: &NoiseSchedule,
    est: &LipschitzEstimates,
    h_at_steps: &[f64],
    lambda: &Lambda,
    w2_terminal: f64,
) -> Result<f64> {
    let l1 = loss_l1_hat(schedule, est, h_at_steps, lambda)?;
    let t_max = schedule.steps;
    let w = step_weights(t_max);
    let mut kernel = 0.0;
    for k in 1..=t_max {
        let t = k as f64 / t_max as f64;
        let beta = est.beta_at(t);
        let m = est.m_factor(t);
        kernel += w[k - 1] * beta * beta * m * m / lambda.at(beta, t)?;
    }
    Ok((2.0 * kernel * l1).sqrt() + est.m_factor(1.0) * w2_terminal)
}

/// Per-checkpoint record tying the empirical W2, loss estimate, M(1), and
/// both bound right-hand sides together.
#[derive(Debug, Clone)]
pub struct BoundReport {
    pub epoch: usize,
    pub l1_hat: f64,
    pub w2_emp: f64,
    pub w2_terminal: f64,
    pub m_terminal: f64,
    pub rhs_thm1: f64,
    pub rhs_cor1: f64,
    pub log_l1: f64,
    pub log_w2: f64,
    pub log_rhs: f64,
    pub l2_estimate: f64,
}

impl BoundReport {
    pub const CSV_HEADER: &'static str =
        "epoch,L1_hat,W2_emp,W2_T,M_T,rhs_thm1,rhs_cor1,log_L1,log_W2,log_rhs";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.l1_hat,
            self.w2_emp,
            self.w2_terminal,
            self.m_terminal,
            self.rhs_thm1,
            self.rhs_cor1,
            self.log_l1,
            self.log_w2,
            self.log_rhs
        )
    }

    pub fn all_finite(&self) -> bool {
        [
            self.l1_hat,
            self.w2_emp,
            self.w2_terminal,
            self.m_terminal,
            self.rhs_thm1,
            self.rhs_cor1,
        ]
        .iter()
        .all(|v| v.is_finite())
            && self.w2_emp >= 0.0
            && self.w2_terminal >= 0.0
    }
}

pub fn write_reports_csv<W: IoWrite>(mut w: W, reports: &[BoundReport]) -> Result<()> {
    writeln!(w, "{}", BoundReport::CSV_HEADER)?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// One point of the log-log picture: log W2 against the bound line
/// (1/2) log(2 int beta M^2 dt) + (1/2) log L1.
#[derive(Debug, Clone, Copy)]
pub struct LogLogPoint {
    pub log_l1: f64,
    pub log_w2: f64,
    pub log_rhs: f64,
}

/// Builds the scatter/line data; nonpositive inputs are skipped and counted.
pub fn log_bound_points(
    reports: &[BoundReport],
    est: &LipschitzEstimates,
) -> (Vec<LogLogPoint>, usize) {
    let intercept = 0.5 * (2.0 * est.integral_beta_m2()).ln();
    let mut pts = Vec::with_capacity(reports.len());
    let mut skipped = 0;
    for r in reports {
        if r.l1_hat <= 0.0 || r.w2_emp <= 0.0 {
            skipped += 1;
            continue;
        }
        let log_l1 = r.l1_hat.ln();
        pts.push(LogLogPoint {
            log_l1,
            log_w2: r.w2_emp.ln(),
            log_rhs: intercept + 0.5 * log_l1,
        });
    }
    (pts, skipped)
}

/// Evaluation knobs for checkpoint reports.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Cloud size for empirical W2 (exact assignment).
    pub w2_samples: usize,
    pub l2_pairs: usize,
    pub h_samples: usize,
    pub l2_max: f64,
    /// Internal grid for M(t) quadrature.
    pub grid_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            w2_samples: 500,
            l2_pairs: 2048,
            h_samples: 4096,
            l2_max: 50.0,
            grid_points: 200,
        }
    }
}

/// Reverse-chain marginals pooled in data order, so every generated cloud
/// carries the same class sequence as the data it is compared against.
pub struct PairedClouds {
    /// Chain step of each cloud, from T down to 0.
    pub steps: Vec<usize>,
    pub clouds: Vec<Vec<[f64; 2]>>,
}

pub fn paired_reverse_clouds(
    model: &CardModel,
    data: &[LabeledSample],
    rng: &mut DetRng,
) -> Result<PairedClouds> {
    let t_max = model.schedule.steps;
    let mut counts = vec![0usize; model.n_classes];
    for s in data {
        counts[s.x] += 1;
    }
    let mut per_class: Vec<Option<crate::diffusion::ReverseTrajectory>> =
        vec![None; model.n_classes];
    for (k, &count) in counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let f = model.f_of_class(k)?;
        let traj = reverse_chain(
            &model.schedule,
            &f,
            |y, t_frac| model.predict_eps(y, &f, t_frac),
            count,
            0,
            rng,
        )?;
        per_class[k] = Some(traj);
    }
    let steps: Vec<usize> = (0..=t_max).rev().collect();
    let mut clouds = Vec::with_capacity(steps.len());
    for (si, &step) in steps.iter().enumerate() {
        let mut used = vec![0usize; model.n_classes];
        let mut cloud = Vec::with_capacity(data.len());
        for s in data {
            let traj = per_class[s.x].as_ref().expect("class with data");
            debug_assert_eq!(traj.steps[si], step);
            cloud.push(traj.clouds[si][used[s.x]]);
            used[s.x] += 1;
        }
        clouds.push(cloud);
    }
    Ok(PairedClouds { steps, clouds })
}

/// Full checkpoint evaluation: per-step score-gap estimates, l2 estimate at
/// the mid step, empirical W2 between data and generated clouds, terminal
/// W2 between the diffused data and the N(f, I) start, and both bounds.
pub fn evaluate_checkpoint(
    model: &CardModel,
    epoch: usize,
    eval_data: &[LabeledSample],
    cfg: &EvalConfig,
    seed: u64,
) -> Result<(BoundReport, Vec<f64>)> {
    let t_max = model.schedule.steps;
    let n = cfg.w2_samples.min(eval_data.len());
    let data = &eval_data[..n];

    let mut rng = DetRng::with_stream(seed, 7000 + epoch as u64);

    // Per-step surrogate score gap.
    let mut pairs = Vec::with_capacity(data.len());
    for s in data {
        pairs.push((s.y0, model.f_of_class(s.x)?));
    }
    let mut h_steps = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let h = score_gap_surrogate(
            &model.schedule,
            &pairs,
            |q| model.score_at(&q.y_t, &q.f, q.t),
            t,
            cfg.h_samples,
            &mut rng,
        )?;
        h_steps.push(h);
    }

    // One-sided Lipschitz estimate at the mid step, held fixed over t.
    let l2 = estimate_l2_model(
        model,
        eval_data,
        (t_max / 2).max(1),
        cfg.l2_pairs,
        cfg.l2_max,
        &mut rng,
    )?;
    let est = LipschitzEstimates::from_schedule(&model.schedule, l2, cfg.grid_points, cfg.l2_max);

    // Clouds: data vs generated (paired classes), diffused data vs chain start.
    let gen = paired_reverse_clouds(model, data, &mut rng)?;
    let data_cloud: Vec<[f64; 2]> = data.iter().map(|s| s.y0).collect();
    let gen_final = gen.clouds.last().expect("trajectory nonempty");
    let w2_emp = w2_exact(
        &EmpiricalMeasure::from_points2(&data_cloud)?,
        &EmpiricalMeasure::from_points2(gen_final)?,
    )?
    .distance;

    let mut diffused = Vec::with_capacity(data.len());
    for (s, pair) in data.iter().zip(&pairs) {
        let (y_t, _) = forward_marginal_sample(&model.schedule, &s.y0, &pair.1, t_max, &mut rng)?;
        diffused.push(y_t);
    }
    let w2_terminal = w2_exact(
        &EmpiricalMeasure::from_points2(&diffused)?,
        &EmpiricalMeasure::from_points2(&gen.clouds[0])?,
    )?
    .distance;

    let lambda = Lambda::Beta;
    let l1_hat = loss_l1_hat(&model.schedule, &est, &h_steps, &lambda)?;
    let rhs_thm1 = theorem1_rhs(&model.schedule, &est, &h_steps, w2_terminal)?;
    let rhs_cor1 = corollary1_rhs(&model.schedule, &est, &h_steps, &lambda, w2_terminal)?;
    let intercept = 0.5 * (2.0 * est.integral_beta_m2()).ln();

    let report = BoundReport {
        epoch,
        l1_hat,
        w2_emp,
        w2_terminal,
        m_terminal: est.m_factor(1.0),
        rhs_thm1,
        rhs_cor1,
        log_l1: l1_hat.max(f64::MIN_POSITIVE).ln(),
        log_w2: w2_emp.max(f64::MIN_POSITIVE).ln(),
        log_rhs: intercept + 0.5 * l1_hat.max(f64::MIN_POSITIVE).ln(),
        l2_estimate: l2,
    };
    if !report.all_finite() {
        return Err(Error::NonFinite(format!("bound report at epoch {epoch}")));
    }
    Ok((report, h_steps))
}

/// M(t) * W2(q_t, p_t) over chain steps: the forward-pushed data against the
/// reverse-chain marginal, weighted by the Gronwall factor at t/T.
pub fn product_curve(
    model: &CardModel,
    est: &LipschitzEstimates,
    data: &[LabeledSample],
    rng: &mut DetRng,
) -> Result<Vec<(usize, f64)>> {
    let t_max = model.schedule.steps;
    let gen = paired_reverse_clouds(model, data, rng)?;
    let mut out = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let mut diffused = Vec::with_capacity(data.len());
        for s in data {
            let f = model.f_of_class(s.x)?;
            let (y_t, _) = forward_marginal_sample(&model.schedule, &s.y0, &f, t, rng)?;
            diffused.push(y_t);
        }
        let offset = gen
            .steps
            .iter()
            .position(|&s| s == t)
            .expect("step in trajectory");
        let w2 = w2_exact(
            &EmpiricalMeasure::from_points2(&diffused)?,
            &EmpiricalMeasure::from_points2(&gen.clouds[offset])?,
        )?
        .distance;
        let m = est.m_factor(t as f64 / t_max as f64);
        out.push((t, m * w2));
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks on ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidParameter(
            "spearman needs two equal-length series".into(),
        ));
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut num, mut dx, mut dy) = (0.0, 0.0, 0.0);
    for i in 0..xs.len() {
        let a = rx[i] - mean;
        let b = ry[i] - mean;
        num += a * b;
        dx += a * a;
        dy += b * b;
    }
    if dx == 0.0 || dy == 0.0 {
        return Ok(0.0);
    }
    Ok(num / (dx * dy).sqrt())
}
