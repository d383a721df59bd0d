//! Poisson multi-Bernoulli mixture filters over object states (PMBM) and over
//! trajectories (TPMBM).
//!
//! The posterior is a Poisson point process (PPP) of undetected objects plus
//! a mixture of multi-Bernoulli densities. Each Bernoulli track keeps a list
//! of local hypotheses; a global hypothesis picks one local hypothesis (or
//! none) per track. In PMBM mode every single-trajectory density is a
//! one-state Gaussian; in TPMBM mode it is a [`TrajectoryGaussian`] with an
//! L-scan window and an end-time mixture.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix4, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::assignment::{solve_k_best, CostMatrix};
use crate::error::{invalid, Result};
use crate::geometry::{CameraPose, UnitVector3};
use crate::models::{
    default_birth, doa_mean, position, BirthComponent, BirthModel, MeasurementModel, MotionModel, ObjectState,
};
use crate::slr::{
    condition_window, extend, iplf_update_with, slr, trajectory_predict, truncate_component, Gaussian4, IplfConfig,
    LinearizationResult, PredictedMeasurement, TrajectoryGaussian, VmfMomentMap, NX,
};

/// Filter family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterMode {
    Pmbm,
    Tpmbm,
}

/// Filter settings. The defaults are the reference values of the synthetic
/// benchmark (TPMBM, L = 5, five IPLF iterations, improved likelihood).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterConfig {
    pub mode: FilterMode,
    /// L-scan window (TPMBM only).
    pub lscan: usize,
    pub iplf: IplfConfig,
    pub gate_threshold: f64,
    pub max_globals: usize,
    pub prune_bernoulli_r: f64,
    pub prune_global_w: f64,
    pub prune_ppp_w: f64,
    pub estimator_r_threshold: f64,
    /// Alive-mass threshold below which a trajectory is frozen as dead.
    pub gamma_a: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            mode: FilterMode::Tpmbm,
            lscan: 5,
            iplf: IplfConfig::default(),
            gate_threshold: 50.0,
            max_globals: 100,
            prune_bernoulli_r: 1e-4,
            prune_global_w: 1e-4,
            prune_ppp_w: 1e-5,
            estimator_r_threshold: 0.5,
            gamma_a: 1e-3,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.gate_threshold,
            self.prune_bernoulli_r,
            self.prune_global_w,
            self.prune_ppp_w,
            self.estimator_r_threshold,
            self.gamma_a,
            self.iplf.settings.kld_threshold,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(invalid("filter thresholds must be nonnegative"));
        }
        if self.lscan == 0 || self.max_globals == 0 || self.iplf.settings.max_iters == 0 {
            return Err(invalid("lscan, max_globals and IPLF iterations must be at least 1"));
        }
        Ok(())
    }

    fn window(&self) -> usize {
        match self.mode {
            FilterMode::Pmbm => 1,
            FilterMode::Tpmbm => self.lscan,
        }
    }
}

/// Undetected-object intensity component.
#[derive(Debug, Clone, PartialEq)]
pub struct PppComponent {
    pub weight: f64,
    pub tg: TrajectoryGaussian,
}

/// Bernoulli local hypothesis.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliComponent {
    pub r: f64,
    pub tg: TrajectoryGaussian,
}

/// A potential object with its local hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub hypotheses: Vec<BernoulliComponent>,
}

/// One local hypothesis index per track (`None`: the track does not exist
/// in this hypothesis).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalHypothesis {
    pub weight: f64,
    pub local: Vec<Option<usize>>,
}

/// Counters of the last update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepStats {
    pub iplf_runs: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PmbmPosterior {
    pub ppp: Vec<PppComponent>,
    pub tracks: Vec<Track>,
    pub globals: Vec<GlobalHypothesis>,
    /// Time index of the latest prediction (`None` before the first frame).
    pub step: Option<usize>,
    pub next_track_id: u64,
    /// PMBM mode: per-track filtered estimates `(step, state)`.
    pub dossier: BTreeMap<u64, Vec<(usize, ObjectState)>>,
    pub stats: StepStats,
}

impl Default for PmbmPosterior {
    fn default() -> Self {
        Self::new()
    }
}

impl PmbmPosterior {
    /// Empty posterior: no PPP, no tracks, one empty global hypothesis.
    pub fn new() -> Self {
        Self {
            ppp: Vec::new(),
            tracks: Vec::new(),
            globals: vec![GlobalHypothesis {
                weight: 1.0,
                local: Vec::new(),
            }],
            step: None,
            next_track_id: 0,
            dossier: BTreeMap::new(),
            stats: StepStats::default(),
        }
    }

    pub fn bernoulli_count(&self) -> usize {
        self.tracks.iter().map(|t| t.hypotheses.len()).sum()
    }

    /// Index of the highest-weight global hypothesis.
    pub fn best_global(&self) -> Option<usize> {
        (0..self.globals.len()).fold(None, |best, i| match best {
            Some(b) if self.globals[b].weight >= self.globals[i].weight => Some(b),
            _ => Some(i),
        })
    }

    /// Expected number of undetected objects.
    pub fn ppp_mass(&self) -> f64 {
        self.ppp.iter().map(|c| c.weight).sum()
    }

    /// Largest stored dense covariance dimension.
    pub fn max_window_dim(&self) -> usize {
        let t = self
            .tracks
            .iter()
            .flat_map(|t| &t.hypotheses)
            .map(|b| b.tg.max_window_dim());
        let p = self.ppp.iter().map(|c| c.tg.max_window_dim());
        t.chain(p).max().unwrap_or(0)
    }

    /// Checks the bookkeeping invariants; returns a description of the first
    /// violation.
    pub fn check_invariants(&self, cfg: &FilterConfig) -> std::result::Result<(), String> {
        let total: f64 = self.globals.iter().map(|g| g.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("global weights sum to {total}"));
        }
        for g in &self.globals {
            if g.local.len() != self.tracks.len() {
                return Err("global hypothesis has wrong length".into());
            }
            for (i, l) in g.local.iter().enumerate() {
                if let Some(h) = l {
                    if *h >= self.tracks[i].hypotheses.len() {
                        return Err(format!("dangling local hypothesis {h} of track {i}"));
                    }
                }
            }
        }
        let bound = cfg.window() * NX;
        for b in self.tracks.iter().flat_map(|t| &t.hypotheses) {
            if !(0.0..=1.0).contains(&b.r) {
                return Err(format!("existence probability {}", b.r));
            }
            let s = b.tg.weight_sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(format!("end-time weights sum to {s}"));
            }
            if b.tg.max_window_dim() > bound {
                return Err(format!("window dimension {} exceeds {bound}", b.tg.max_window_dim()));
            }
        }
        if self.ppp.iter().any(|c| c.weight < 0.0 || c.tg.max_window_dim() > bound) {
            return Err("invalid PPP component".into());
        }
        Ok(())
    }
}

/// Models used by one filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub motion: MotionModel,
    pub birth: BirthModel,
    pub measurement: MeasurementModel,
}

fn predict_tg(tg: &TrajectoryGaussian, motion: &MotionModel, k: usize, cfg: &FilterConfig) -> TrajectoryGaussian {
    match cfg.mode {
        FilterMode::Tpmbm => trajectory_predict(tg, motion, k),
        FilterMode::Pmbm => {
            let mut out = tg.clone();
            for c in &mut out.components {
                *c = extend(c, motion);
                c.weight = 1.0;
                truncate_component(c, 1, false);
            }
            out
        }
    }
}

fn alive_only(tg: &TrajectoryGaussian, motion: &MotionModel, k: usize, cfg: &FilterConfig) -> TrajectoryGaussian {
    let mut out = tg.clone();
    out.components = tg
        .components
        .iter()
        .filter(|c| c.end_step == k)
        .map(|c| {
            let mut e = extend(c, motion);
            e.weight = 1.0;
            if cfg.mode == FilterMode::Pmbm {
                truncate_component(&mut e, 1, false);
            }
            e
        })
        .collect();
    out
}

/// Prediction to the next time step; `birth` is appended to the PPP. On the
/// first call the posterior only receives the birth component.
pub fn predict(
    mut post: PmbmPosterior,
    motion: &MotionModel,
    birth: &BirthComponent,
    cfg: &FilterConfig,
) -> PmbmPosterior {
    let next = match post.step {
        None => 0,
        Some(k) => {
            for c in &mut post.ppp {
                c.weight *= motion.ps;
                c.tg = alive_only(&c.tg, motion, k, cfg);
            }
            for b in post.tracks.iter_mut().flat_map(|t| &mut t.hypotheses) {
                if cfg.mode == FilterMode::Pmbm {
                    b.r *= motion.ps;
                }
                b.tg = predict_tg(&b.tg, motion, k, cfg);
            }
            k + 1
        }
    };
    post.ppp.push(PppComponent {
        weight: birth.weight,
        tg: TrajectoryGaussian::new(next, &Gaussian4::new(birth.mean, birth.cov)),
    });
    post.step = Some(next);
    post
}

/// Per-density quantities shared by all measurements.
struct Prepared {
    prior: Gaussian4,
    lin: LinearizationResult<NX>,
    pm: PredictedMeasurement,
}

fn effective_pd(x: &ObjectState, model: &MeasurementModel, pose: &CameraPose) -> f64 {
    match doa_mean(x, pose) {
        Ok(h) if model.fov.contains(&h) => model.pd,
        _ => 0.0,
    }
}

fn prepare(prior: Gaussian4, map: &VmfMomentMap<'_>, cfg: &FilterConfig) -> Result<Prepared> {
    let lin = slr(map, &prior, cfg.iplf.settings.w0)?;
    let pm = PredictedMeasurement::new(&lin, &prior);
    Ok(Prepared { prior, lin, pm })
}

fn log_sum_exp(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

struct HypEval {
    miss: BernoulliComponent,
    log_miss: f64,
    det: Vec<Option<(BernoulliComponent, f64)>>,
}

struct Detection {
    posterior: Gaussian4,
    log_marginal: f64,
}

struct Ctx<'a> {
    model: &'a MeasurementModel,
    pose: &'a CameraPose,
    map: VmfMomentMap<'a>,
    cfg: &'a FilterConfig,
    zs: &'a [UnitVector3],
    stats: StepStats,
}

impl Ctx<'_> {
    /// IPLF results for every gated measurement (`None` when gated out).
    fn detections(&mut self, prior: &Gaussian4) -> Result<Vec<Option<Detection>>> {
        let p = prepare(prior.clone(), &self.map, self.cfg)?;
        let mut out = Vec::with_capacity(self.zs.len());
        for z in self.zs {
            if p.pm.mahalanobis2(z) > self.cfg.gate_threshold {
                out.push(None);
                continue;
            }
            let o = iplf_update_with(
                &p.prior,
                z,
                &self.map,
                self.model.kappa,
                self.pose,
                &self.cfg.iplf,
                Some((&p.lin, &p.pm)),
            )?;
            self.stats.iplf_runs += 1;
            self.stats.diverged += usize::from(o.diverged);
            if o.log_marginal.is_finite() {
                out.push(Some(Detection {
                    posterior: o.posterior,
                    log_marginal: o.log_marginal,
                }));
            } else {
                out.push(None);
            }
        }
        Ok(out)
    }
}

fn evaluate_hypothesis(b: &BernoulliComponent, k: usize, ctx: &mut Ctx<'_>) -> Result<HypEval> {
    let m = ctx.zs.len();
    let alive = b.tg.alive_index(k);
    let (beta, pd) = match alive {
        Some(i) => {
            let c = &b.tg.components[i];
            (c.weight, effective_pd(&c.last().mean, ctx.model, ctx.pose))
        }
        None => (0.0, 0.0),
    };
    let q = b.r * pd * beta;
    let w_miss = (1.0 - q).max(f64::MIN_POSITIVE);
    let mut miss = b.clone();
    if q > 0.0 && 1.0 - pd * beta > 0.0 {
        miss.r = (b.r * (1.0 - pd * beta) / w_miss).clamp(0.0, 1.0);
        let i = alive.expect("pd > 0 needs an alive component");
        miss.tg.components[i].weight *= 1.0 - pd;
        miss.tg.normalize();
    } else if q > 0.0 {
        miss.r = 0.0;
    }
    let mut det: Vec<Option<(BernoulliComponent, f64)>> = (0..m).map(|_| None).collect();
    if let (Some(i), true) = (alive, q > 0.0) {
        let c = &b.tg.components[i];
        let dets = ctx.detections(&c.last())?;
        let base = b.r.ln() + beta.ln() + pd.ln();
        for (j, d) in dets.into_iter().enumerate() {
            if let Some(d) = d {
                let mut comp = condition_window(c, &d.posterior, ctx.cfg.window());
                comp.weight = 1.0;
                let tg = TrajectoryGaussian {
                    birth_step: b.tg.birth_step,
                    components: vec![comp],
                };
                det[j] = Some((BernoulliComponent { r: 1.0, tg }, base + d.log_marginal));
            }
        }
    }
    Ok(HypEval {
        miss,
        log_miss: w_miss.ln(),
        det,
    })
}

fn moment_match(parts: &[(f64, Gaussian4)]) -> Gaussian4 {
    let mean: Vector4<f64> = parts.iter().map(|(w, g)| g.mean * *w).sum();
    let cov: Matrix4<f64> = parts
        .iter()
        .map(|(w, g)| (g.cov + (g.mean - mean) * (g.mean - mean).transpose()) * *w)
        .sum();
    Gaussian4::new(mean, cov)
}

/// Measurement update followed by pruning. Measurements outside the FoV are
/// ignored.
pub fn update(
    post: PmbmPosterior,
    measurements: &[UnitVector3],
    model: &MeasurementModel,
    pose: &CameraPose,
    cfg: &FilterConfig,
) -> Result<PmbmPosterior> {
    let k = post
        .step
        .ok_or_else(|| invalid("update called before the first prediction"))?;
    let zs: Vec<UnitVector3> = measurements.iter().filter(|z| model.fov.contains(z)).copied().collect();
    let m = zs.len();
    let n = post.tracks.len();
    let mut ctx = Ctx {
        model,
        pose,
        map: VmfMomentMap::new(model.kappa, pose),
        cfg,
        zs: &zs,
        stats: StepStats::default(),
    };

    // New tracks from the PPP.
    let mut ppp = post.ppp;
    let mut cand: Vec<Vec<(f64, usize, Gaussian4)>> = (0..m).map(|_| Vec::new()).collect();
    for (ci, c) in ppp.iter_mut().enumerate() {
        let Some(alive) = c.tg.alive(k) else { continue };
        let last = alive.last();
        let pd = effective_pd(&last.mean, model, pose);
        if pd == 0.0 || c.weight <= 0.0 {
            continue;
        }
        for (j, d) in ctx.detections(&last)?.into_iter().enumerate() {
            if let Some(d) = d {
                cand[j].push((c.weight.ln() + pd.ln() + d.log_marginal, ci, d.posterior));
            }
        }
        c.weight *= 1.0 - pd;
    }
    let mut log_rho = vec![0.0; m];
    let mut new_hyps: Vec<Option<BernoulliComponent>> = Vec::with_capacity(m);
    for j in 0..m {
        let log_e = log_sum_exp(cand[j].iter().map(|c| c.0));
        let lr = log_sum_exp([log_e, model.clutter_intensity(&zs[j]).ln()]).max(f64::MIN_POSITIVE.ln());
        log_rho[j] = lr;
        if cand[j].is_empty() || !log_e.is_finite() {
            new_hyps.push(None);
            continue;
        }
        let r = (log_e - lr).exp().clamp(0.0, 1.0);
        let tg = match cfg.mode {
            FilterMode::Pmbm => {
                let parts: Vec<(f64, Gaussian4)> =
                    cand[j].iter().map(|(l, _, g)| ((l - log_e).exp(), g.clone())).collect();
                TrajectoryGaussian::new(k, &moment_match(&parts))
            }
            FilterMode::Tpmbm => {
                // PPP components of different birth times have different
                // dimensions; the dominant one carries the new track.
                let (_, ci, g) = cand[j].iter().max_by(|a, b| a.0.total_cmp(&b.0)).expect("non-empty");
                let src = &ppp[*ci].tg;
                let alive = src.alive(k).expect("gated PPP component is alive");
                let mut comp = condition_window(alive, g, cfg.window());
                comp.weight = 1.0;
                TrajectoryGaussian {
                    birth_step: src.birth_step,
                    components: vec![comp],
                }
            }
        };
        new_hyps.push(Some(BernoulliComponent { r, tg }));
    }

    // Single-target hypotheses of existing tracks.
    let mut evals: Vec<Vec<HypEval>> = Vec::with_capacity(n);
    for t in &post.tracks {
        let mut e = Vec::with_capacity(t.hypotheses.len());
        for b in &t.hypotheses {
            e.push(evaluate_hypothesis(b, k, &mut ctx)?);
        }
        evals.push(e);
    }

    // Global hypotheses. A child records, per track, the parent's local
    // hypothesis and the measurement assigned to it.
    type Child = (f64, Vec<Option<(usize, Option<usize>)>>, Vec<bool>);
    let mut children: Vec<Child> = Vec::new();
    for g in &post.globals {
        let mut base = g.weight.ln();
        for (i, l) in g.local.iter().enumerate() {
            if let Some(h) = l {
                base += evals[i][*h].log_miss;
            }
        }
        let mut cost = CostMatrix::forbidden(m, n + m);
        for (j, rho) in log_rho.iter().enumerate() {
            for (i, l) in g.local.iter().enumerate() {
                if let Some(h) = l {
                    let e = &evals[i][*h];
                    if let Some((_, lw)) = &e.det[j] {
                        cost.set(j, i, -(lw - e.log_miss));
                    }
                }
            }
            cost.set(j, n + j, -rho);
        }
        let budget = ((cfg.max_globals as f64) * g.weight).ceil().max(1.0) as usize;
        for a in solve_k_best(&cost, budget)? {
            let mut local: Vec<Option<(usize, Option<usize>)>> = g.local.iter().map(|l| l.map(|h| (h, None))).collect();
            let mut born = vec![false; m];
            for (j, &col) in a.cols.iter().enumerate() {
                if col < n {
                    let h = g.local[col].expect("assigned track exists");
                    local[col] = Some((h, Some(j)));
                } else {
                    born[j] = true;
                }
            }
            children.push((base - a.cost, local, born));
        }
    }
    let norm = log_sum_exp(children.iter().map(|c| c.0));

    // Materialize referenced local hypotheses.
    let mut tracks: Vec<Track> = post
        .tracks
        .iter()
        .map(|t| Track {
            id: t.id,
            hypotheses: Vec::new(),
        })
        .collect();
    let mut index: Vec<HashMap<(usize, Option<usize>), usize>> = vec![HashMap::new(); n];
    let mut next_id = post.next_track_id;
    let mut new_track_index: Vec<Option<usize>> = vec![None; m];
    for (j, h) in new_hyps.iter().enumerate() {
        if h.is_some() {
            new_track_index[j] = Some(tracks.len());
            tracks.push(Track {
                id: next_id,
                hypotheses: Vec::new(),
            });
            next_id += 1;
        }
    }
    let mut globals = Vec::with_capacity(children.len());
    for (lw, local, born) in children {
        let mut out: Vec<Option<usize>> = vec![None; tracks.len()];
        for (i, l) in local.into_iter().enumerate() {
            if let Some(key) = l {
                let idx = *index[i].entry(key).or_insert_with(|| {
                    let e = &evals[i][key.0];
                    let b = match key.1 {
                        None => e.miss.clone(),
                        Some(j) => e.det[j].as_ref().expect("assigned pair was gated").0.clone(),
                    };
                    tracks[i].hypotheses.push(b);
                    tracks[i].hypotheses.len() - 1
                });
                out[i] = Some(idx);
            }
        }
        for (j, b) in born.iter().enumerate() {
            if let (true, Some(t)) = (*b, new_track_index[j]) {
                if tracks[t].hypotheses.is_empty() {
                    tracks[t]
                        .hypotheses
                        .push(new_hyps[j].clone().expect("new hypothesis exists"));
                }
                out[t] = Some(0);
            }
        }
        globals.push(GlobalHypothesis {
            weight: (lw - norm).exp(),
            local: out,
        });
    }

    let out = PmbmPosterior {
        ppp,
        tracks,
        globals,
        step: Some(k),
        next_track_id: next_id,
        dossier: post.dossier,
        stats: ctx.stats,
    };
    Ok(prune(out, cfg))
}

/// Pruning of PPP components, Bernoulli components and global hypotheses.
pub fn prune(mut post: PmbmPosterior, cfg: &FilterConfig) -> PmbmPosterior {
    post.ppp.retain(|c| c.weight >= cfg.prune_ppp_w);
    if let (FilterMode::Tpmbm, Some(k)) = (cfg.mode, post.step) {
        for b in post.tracks.iter_mut().flat_map(|t| &mut t.hypotheses) {
            if let Some(i) = b.tg.alive_index(k) {
                if b.tg.components[i].weight < cfg.gamma_a && b.tg.components.len() > 1 {
                    b.tg.components.remove(i);
                    b.tg.normalize();
                }
            }
        }
    }
    for g in &mut post.globals {
        for (i, l) in g.local.iter_mut().enumerate() {
            if let Some(h) = l {
                if post.tracks[i].hypotheses[*h].r < cfg.prune_bernoulli_r {
                    *l = None;
                }
            }
        }
    }
    // Merge duplicates, keeping first-appearance order.
    let n_before = post.globals.len();
    let mut merged: Vec<GlobalHypothesis> = Vec::with_capacity(n_before);
    let mut seen: HashMap<Vec<Option<usize>>, usize> = HashMap::new();
    for g in post.globals {
        match seen.get(&g.local) {
            Some(&i) => merged[i].weight += g.weight,
            None => {
                seen.insert(g.local.clone(), merged.len());
                merged.push(g);
            }
        }
    }
    let changed = merged.len() != n_before;
    merged.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    let total: f64 = merged.iter().map(|g| g.weight).sum();
    let mut kept: Vec<GlobalHypothesis> = Vec::with_capacity(merged.len().min(cfg.max_globals));
    for (i, g) in merged.into_iter().enumerate() {
        if i > 0 && (g.weight / total < cfg.prune_global_w || kept.len() >= cfg.max_globals) {
            break;
        }
        kept.push(g);
    }
    if changed || kept.len() != n_before {
        let s: f64 = kept.iter().map(|g| g.weight).sum();
        kept.iter_mut().for_each(|g| g.weight /= s);
    }

    // Drop unreferenced local hypotheses and empty tracks.
    let mut tracks = Vec::with_capacity(post.tracks.len());
    let mut track_map = vec![None; post.tracks.len()];
    for (i, t) in post.tracks.into_iter().enumerate() {
        let mut used: Vec<usize> = kept.iter().filter_map(|g| g.local[i]).collect();
        used.sort_unstable();
        used.dedup();
        if used.is_empty() {
            continue;
        }
        let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(new, old)| (*old, new)).collect();
        let mut hyps: Vec<Option<BernoulliComponent>> = t.hypotheses.into_iter().map(Some).collect();
        let hypotheses = used.iter().map(|h| hyps[*h].take().expect("unique")).collect();
        for g in &mut kept {
            g.local[i] = g.local[i].map(|h| remap[&h]);
        }
        track_map[i] = Some(tracks.len());
        tracks.push(Track { id: t.id, hypotheses });
    }
    for g in &mut kept {
        let mut local = vec![None; tracks.len()];
        for (i, l) in g.local.iter().enumerate() {
            if let Some(ni) = track_map[i] {
                local[ni] = *l;
            }
        }
        g.local = local;
    }
    post.tracks = tracks;
    post.globals = kept;
    post
}

/// Applies the L-scan truncation to every trajectory density.
pub fn truncate(mut post: PmbmPosterior, cfg: &FilterConfig) -> PmbmPosterior {
    let (l, keep) = match cfg.mode {
        FilterMode::Pmbm => (1, false),
        FilterMode::Tpmbm => (cfg.lscan, true),
    };
    let tgs = post
        .tracks
        .iter_mut()
        .flat_map(|t| t.hypotheses.iter_mut().map(|b| &mut b.tg));
    for tg in tgs.chain(post.ppp.iter_mut().map(|c| &mut c.tg)) {
        for c in &mut tg.components {
            truncate_component(c, l, keep);
        }
    }
    post
}

/// Estimated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedTrajectory {
    pub id: u64,
    pub birth_step: usize,
    pub end_step: usize,
    /// One state per step from `birth_step` to `end_step`.
    pub states: Vec<ObjectState>,
}

impl EstimatedTrajectory {
    pub fn state_at(&self, k: usize) -> Option<&ObjectState> {
        if k < self.birth_step || k > self.end_step {
            return None;
        }
        self.states.get(k - self.birth_step)
    }
}

/// Positions of all trajectories present at step `k`.
pub fn positions_at(trajectories: &[EstimatedTrajectory], k: usize) -> Vec<Vector2<f64>> {
    trajectories
        .iter()
        .filter_map(|t| t.state_at(k))
        .map(position)
        .collect()
}

/// Current estimates `(track id, state)` of the best global hypothesis.
fn current_estimates(post: &PmbmPosterior, cfg: &FilterConfig) -> Vec<(u64, ObjectState)> {
    let (Some(best), Some(k)) = (post.best_global(), post.step) else {
        return Vec::new();
    };
    let mut out = Vec::new();
    for (i, l) in post.globals[best].local.iter().enumerate() {
        if let Some(h) = l {
            let b = &post.tracks[i].hypotheses[*h];
            if b.r >= cfg.estimator_r_threshold {
                if let Some(c) = b.tg.alive(k) {
                    out.push((post.tracks[i].id, c.last().mean));
                }
            }
        }
    }
    out
}

/// Trajectory estimates.
///
/// TPMBM: for the best global hypothesis, every Bernoulli with existence at
/// least the threshold reports the mean sequence of its most probable end
/// time (dead trajectories included). PMBM: the filtered estimates recorded
/// at each step, split into contiguous runs per track.
pub fn estimate(post: &PmbmPosterior, cfg: &FilterConfig) -> Vec<EstimatedTrajectory> {
    match cfg.mode {
        FilterMode::Tpmbm => {
            let Some(best) = post.best_global() else {
                return Vec::new();
            };
            let mut out = Vec::new();
            for (i, l) in post.globals[best].local.iter().enumerate() {
                if let Some(h) = l {
                    let b = &post.tracks[i].hypotheses[*h];
                    if b.r >= cfg.estimator_r_threshold {
                        let c = b.tg.map_component();
                        let states = c.mean_states();
                        out.push(EstimatedTrajectory {
                            id: post.tracks[i].id,
                            birth_step: c.end_step + 1 - states.len(),
                            end_step: c.end_step,
                            states,
                        });
                    }
                }
            }
            out
        }
        FilterMode::Pmbm => {
            let mut out = Vec::new();
            for (id, entries) in &post.dossier {
                let mut start = 0;
                for i in 1..=entries.len() {
                    if i == entries.len() || entries[i].0 != entries[i - 1].0 + 1 {
                        out.push(EstimatedTrajectory {
                            id: *id,
                            birth_step: entries[start].0,
                            end_step: entries[i - 1].0,
                            states: entries[start..i].iter().map(|e| e.1).collect(),
                        });
                        start = i;
                    }
                }
            }
            out
        }
    }
}

/// One filter recursion: predict, update, prune and truncate. `motion`
/// carries the sampling period since the previous frame.
pub fn step(
    post: PmbmPosterior,
    measurements: &[UnitVector3],
    pose: &CameraPose,
    models: &Models,
    cfg: &FilterConfig,
) -> Result<PmbmPosterior> {
    let next = post.step.map_or(0, |k| k + 1);
    let birth = default_birth(pose, &models.birth, next)?;
    let post = predict(post, &models.motion, &birth, cfg);
    let post = update(post, measurements, &models.measurement, pose, cfg)?;
    let post = prune(post, cfg);
    let mut post = truncate(post, cfg);
    if cfg.mode == FilterMode::Pmbm {
        for (id, x) in current_estimates(&post, cfg) {
            post.dossier.entry(id).or_default().push((next, x));
        }
    }
    Ok(post)
}

/// One time step without a measurement update, for frames that were never
/// observed. Births still arrive and objects still move.
pub fn predict_step(
    post: PmbmPosterior,
    pose: &CameraPose,
    models: &Models,
    cfg: &FilterConfig,
) -> Result<PmbmPosterior> {
    let next = post.step.map_or(0, |k| k + 1);
    let birth = default_birth(pose, &models.birth, next)?;
    let post = predict(post, &models.motion, &birth, cfg);
    let post = prune(post, cfg);
    let mut post = truncate(post, cfg);
    post.stats = StepStats::default();
    if cfg.mode == FilterMode::Pmbm {
        for (id, x) in current_estimates(&post, cfg) {
            post.dossier.entry(id).or_default().push((next, x));
        }
    }
    Ok(post)
}
