//! Alternating per-site search over weight and activation quantizers.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::objective::{weighted_sq, Geometry, ObjectiveKind, SiteProblem};
use super::search::{
    channel_candidates, search_best, softmax_candidates, step_candidates, uniform_candidates,
    CandidateSet,
};
use super::stats::LayerStats;
use crate::error::{Error, Result};
use crate::model::{DiTModel, SiteKind};
use crate::quant::{
    check_grouping, group_of, init_gelu, init_minmax, init_softmax, ActQuant, MultiRegionParams,
    QuantParams, QuantizedModel, Quantizer, RegionKind, SiteQuantizer, TimeGroupedParams,
    WeightQuant,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationOptions {
    pub weight_bits: u32,
    pub act_bits: u32,
    /// Alternation rounds `R`.
    pub rounds: usize,
    /// Timestep groups used when `time_grouping` is set.
    pub groups: usize,
    pub objective: ObjectiveKind,
    /// Two-region quantizers for post-softmax and post-GELU operands.
    pub multi_region: bool,
    /// Per-group parameters for post-softmax operands.
    pub time_grouping: bool,
    pub per_channel_weights: bool,
    pub quantize_final_linear: bool,
    /// Trial values per parameter sweep; a positive multiple of 5.
    pub candidates: usize,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            weight_bits: 8,
            act_bits: 8,
            rounds: 3,
            groups: 10,
            objective: ObjectiveKind::Hessian,
            multi_region: true,
            time_grouping: true,
            per_channel_weights: false,
            quantize_final_linear: true,
            candidates: 100,
        }
    }
}

impl CalibrationOptions {
    pub fn validate(&self) -> Result<()> {
        for bits in [self.weight_bits, self.act_bits] {
            if !(2..=8).contains(&bits) {
                return Err(Error::Config(format!("bit width {bits} outside 2..=8")));
            }
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.groups == 0 {
            return Err(Error::Config("groups must be at least 1".into()));
        }
        super::search::sweep_factors(self.candidates).map(|_| ())
    }
}

/// Calibration outcome of one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub id: String,
    pub kind: SiteKind,
    pub quantizer: SiteQuantizer,
    /// Objective at the min-max initialization.
    pub objective_init: f64,
    pub objective_final: f64,
    /// Objective after the initialization and after every accepted update.
    pub trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub options: CalibrationOptions,
    pub sites: Vec<SiteReport>,
}

impl CalibrationReport {
    /// Mean final objective over the quantized sites.
    pub fn mean_objective(&self) -> f64 {
        let done: Vec<f64> = self
            .sites
            .iter()
            .filter(|s| s.quantizer != SiteQuantizer::FullPrecision)
            .map(|s| s.objective_final)
            .collect();
        done.iter().sum::<f64>() / done.len().max(1) as f64
    }

    /// One line per site: id, kind, winning parameters, objective before and
    /// after, and the per-update trace.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.sites {
            let params = serde_json::to_string(&s.quantizer).expect("quantizer serializes");
            let trace: Vec<String> = s.trace.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&format!(
                "site={} kind={} before={:e} after={:e} trace=[{}] params={}\n",
                s.id,
                s.kind,
                s.objective_init,
                s.objective_final,
                trace.join(","),
                params
            ));
        }
        out
    }
}

/// Per-sample state shared by every objective evaluation of a site.
struct Evaluator<'a> {
    problem: &'a SiteProblem,
    geom: Geometry,
    reference: Vec<Vec<f64>>,
    weighted: bool,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a SiteProblem, kind: ObjectiveKind) -> Result<Self> {
        problem.validate()?;
        let geom = Geometry::of(problem)?;
        let rhs_fixed = problem.weight.as_ref().map(|w| geom.kernel_rhs(w.data()));
        let mut ev = Evaluator {
            problem,
            geom,
            reference: Vec::new(),
            weighted: kind == ObjectiveKind::Hessian,
        };
        ev.reference = problem
            .samples
            .iter()
            .map(|s| {
                match &rhs_fixed {
                    Some(w) => ev.output(s.lhs.data(), w),
                    None => ev.output(
                        s.lhs.data(),
                        &geom.kernel_rhs(s.rhs.as_ref().expect("validated").data()),
                    ),
                }
            })
            .collect();
        Ok(ev)
    }

    fn output(&self, lhs: &[f64], rhs_k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.geom.out_len()];
        self.geom
            .forward(lhs, rhs_k, self.problem.bias.as_deref(), &mut out);
        out
    }

    fn sample_objective(&self, s: usize, lhs: &[f64], rhs_k: &[f64]) -> f64 {
        let out = self.output(lhs, rhs_k);
        let g2 = self.weighted.then(|| self.problem.samples[s].g2.data());
        weighted_sq(&out, &self.reference[s], g2)
    }

    /// Mean objective over `indices`, summed in index order.
    fn mean<'b, L, R>(&self, indices: &[usize], lhs: L, rhs: R) -> Result<f64>
    where
        L: Fn(usize) -> Result<Cow<'b, [f64]>>,
        R: Fn(usize) -> Result<Cow<'b, [f64]>>,
    {
        if indices.is_empty() {
            return Err(Error::Calibration(format!(
                "no calibration samples selected for site {}",
                self.problem.id
            )));
        }
        let mut total = 0.0;
        for &s in indices {
            total += self.sample_objective(s, &lhs(s)?, &rhs(s)?);
        }
        Ok(total / indices.len() as f64)
    }
}

fn all_values<'a>(it: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    it.flat_map(|v| v.iter().copied()).collect()
}

fn weight_candidates(init: &WeightQuant, count: usize) -> Result<(CandidateSet, Vec<WeightQuant>)> {
    match init {
        WeightQuant::PerTensor { params } => {
            let set = uniform_candidates(params, count)?;
            let qs = set
                .values
                .iter()
                .map(|&s| WeightQuant::PerTensor { params: params.with_step(s) })
                .collect();
            Ok((set, qs))
        }
        WeightQuant::PerChannel { params } => {
            let set = channel_candidates(count)?;
            let qs = set
                .values
                .iter()
                .map(|&g| WeightQuant::PerChannel {
                    params: params.iter().map(|p| p.with_step(g * p.s)).collect(),
                })
                .collect();
            Ok((set, qs))
        }
    }
}

fn weight_init(w: &crate::autodiff::Tensor, bits: u32, per_channel: bool) -> Result<WeightQuant> {
    if per_channel {
        let cols = w.shape()[1];
        let params = w
            .data()
            .chunks(cols)
            .map(|row| init_minmax(row, bits).map(|i| i.params))
            .collect::<Result<Vec<_>>>()?;
        Ok(WeightQuant::PerChannel { params })
    } else {
        Ok(WeightQuant::PerTensor {
            params: init_minmax(w.data(), bits)?.params,
        })
    }
}

/// Candidate quantizers for one activation operand, grouped into the
/// coordinate sweeps applied one after another in each round.
enum ActFamily {
    Uniform(QuantParams, CandidateSet),
    Softmax(MultiRegionParams, CandidateSet),
    Gelu(MultiRegionParams, CandidateSet, CandidateSet),
}

impl ActFamily {
    fn init(&self) -> Quantizer {
        match self {
            ActFamily::Uniform(p, _) => Quantizer::Uniform(*p),
            ActFamily::Softmax(p, _) | ActFamily::Gelu(p, _, _) => Quantizer::MultiRegion(*p),
        }
    }

    /// Each sweep maps the current quantizer to its candidate list and the
    /// step size each candidate is tie-broken on.
    fn sweeps(&self, current: &Quantizer) -> Vec<Vec<(Quantizer, f64)>> {
        match (self, current) {
            (ActFamily::Uniform(p, set), _) => vec![set
                .values
                .iter()
                .map(|&s| (Quantizer::Uniform(p.with_step(s)), s))
                .collect()],
            (ActFamily::Softmax(p, set), _) => vec![set
                .values
                .iter()
                .map(|&s| {
                    let q = MultiRegionParams::softmax(s, p.bits).expect("lattice candidate");
                    (Quantizer::MultiRegion(q), s)
                })
                .collect()],
            (ActFamily::Gelu(p, neg, pos), Quantizer::MultiRegion(cur)) => {
                let with = |s1: f64, s2: f64| {
                    Quantizer::MultiRegion(MultiRegionParams::gelu(s1, s2, p.bits).expect("positive steps"))
                };
                vec![
                    neg.values.iter().map(|&s| (with(s, cur.s2), s)).collect(),
                    pos.values.iter().map(|&s| (with(cur.s1, s), s)).collect(),
                ]
            }
            (ActFamily::Gelu(..), Quantizer::Uniform(_)) => unreachable!("gelu family holds two-region params"),
        }
    }

    /// Second sweep of a GELU family must see the first sweep's winner.
    fn sweep_count(&self) -> usize {
        match self {
            ActFamily::Gelu(..) => 2,
            _ => 1,
        }
    }
}

fn act_family(values: &[f64], bits: u32, region: Option<RegionKind>, count: usize) -> Result<ActFamily> {
    Ok(match region {
        None => {
            let p = init_minmax(values, bits)?.params;
            ActFamily::Uniform(p, uniform_candidates(&p, count)?)
        }
        Some(RegionKind::PostSoftmax) => {
            let p = init_softmax(values, bits)?;
            ActFamily::Softmax(p, softmax_candidates(&p, count)?)
        }
        Some(RegionKind::PostGelu) => {
            let p = init_gelu(values, bits)?;
            ActFamily::Gelu(p, step_candidates(p.s1, count)?, step_candidates(p.s2, count)?)
        }
    })
}

fn quantize(q: &Quantizer, x: &[f64]) -> Result<Vec<f64>> {
    q.quantize_slice(x)
}

/// Runs the alternating search for one site.
pub fn calibrate_site(problem: &SiteProblem, options: &CalibrationOptions) -> Result<SiteReport> {
    options.validate()?;
    let ev = Evaluator::new(problem, options.objective)?;
    let all: Vec<usize> = (0..problem.samples.len()).collect();
    let count = options.candidates;
    let mut trace = Vec::new();

    let quantizer = if problem.kind.is_linear() {
        let w = problem.weight.as_ref().expect("validated");
        let region = (problem.kind == SiteKind::PostGeluLinear && options.multi_region)
            .then_some(RegionKind::PostGelu);
        let xs = all_values(problem.samples.iter().map(|s| s.lhs.data()));
        let family = act_family(&xs, options.act_bits, region, count)?;
        let mut wq = weight_init(w, options.weight_bits, options.per_channel_weights)?;
        let (w_set, w_cands) = weight_candidates(&wq, count)?;
        let w_steps = w_set.values;
        let mut xq = family.init();

        let quantized_inputs = |q: &Quantizer| -> Result<Vec<Vec<f64>>> {
            problem.samples.iter().map(|s| quantize(q, s.lhs.data())).collect()
        };
        let mut x_hat = quantized_inputs(&xq)?;
        let mut w_hat = ev.geom.kernel_rhs(wq.apply(w)?.data());
        trace.push(ev.mean(&all, |s| Ok(Cow::Borrowed(&x_hat[s][..])), |_| Ok(Cow::Borrowed(&w_hat[..])))?);

        for _ in 0..options.rounds {
            let idx: Vec<usize> = (0..w_cands.len()).collect();
            let (best, obj) = search_best(
                &idx,
                |&i| w_steps[i],
                |&i| {
                    let wk = ev.geom.kernel_rhs(w_cands[i].apply(w)?.data());
                    ev.mean(&all, |s| Ok(Cow::Borrowed(&x_hat[s][..])), |_| Ok(Cow::Borrowed(&wk[..])))
                },
            )?;
            wq = w_cands[best].clone();
            w_hat = ev.geom.kernel_rhs(wq.apply(w)?.data());
            trace.push(obj);

            for sweep in 0..family.sweep_count() {
                let cands = family.sweeps(&xq).swap_remove(sweep);
                let (best, obj) = search_best(
                    &cands,
                    |c| c.1,
                    |c| ev.mean(&all, |s| quantize(&c.0, problem.samples[s].lhs.data()).map(Cow::Owned), |_| Ok(Cow::Borrowed(&w_hat[..]))),
                )?;
                xq = cands[best].0;
                x_hat = quantized_inputs(&xq)?;
                trace.push(obj);
            }
        }
        SiteQuantizer::Linear {
            weight: wq,
            input: ActQuant::Static { quantizer: xq },
        }
    } else {
        let softmax = problem.kind == SiteKind::PostSoftmaxMatmul;
        let region = (softmax && options.multi_region).then_some(RegionKind::PostSoftmax);
        let grouped = softmax && options.time_grouping;
        let a_vals = all_values(problem.samples.iter().map(|s| s.lhs.data()));
        let b_vals = all_values(problem.samples.iter().map(|s| s.rhs.as_ref().expect("validated").data()));
        let a_family = act_family(&a_vals, options.act_bits, region, count)?;
        let b_family = act_family(&b_vals, options.act_bits, None, count)?;

        let groups = if grouped { options.groups } else { 1 };
        check_grouping(problem.timesteps, groups)?;
        let group_index: Vec<usize> = problem
            .samples
            .iter()
            .map(|s| group_of(s.t, problem.timesteps, groups).map(|g| g - 1))
            .collect::<Result<_>>()?;
        let members: Vec<Vec<usize>> = (0..groups)
            .map(|g| all.iter().copied().filter(|&s| group_index[s] == g).collect())
            .collect();

        let mut aq: Vec<Quantizer> = vec![a_family.init(); groups];
        let mut bq = b_family.init();
        let quant_a = |aq: &[Quantizer]| -> Result<Vec<Vec<f64>>> {
            problem
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| quantize(&aq[group_index[i]], s.lhs.data()))
                .collect()
        };
        let quant_b = |q: &Quantizer| -> Result<Vec<Vec<f64>>> {
            problem
                .samples
                .iter()
                .map(|s| Ok(ev.geom.kernel_rhs(&quantize(q, s.rhs.as_ref().expect("validated").data())?)))
                .collect()
        };
        let mut a_hat = quant_a(&aq)?;
        let mut b_hat = quant_b(&bq)?;
        trace.push(ev.mean(&all, |s| Ok(Cow::Borrowed(&a_hat[s][..])), |s| Ok(Cow::Borrowed(&b_hat[s][..])))?);

        for _ in 0..options.rounds {
            for sweep in 0..a_family.sweep_count() {
                for g in 0..groups {
                    let cands = a_family.sweeps(&aq[g]).swap_remove(sweep);
                    let (best, _) = search_best(
                        &cands,
                        |c| c.1,
                        |c| {
                            ev.mean(
                                &members[g],
                                |s| quantize(&c.0, problem.samples[s].lhs.data()).map(Cow::Owned),
                                |s| Ok(Cow::Borrowed(&b_hat[s][..])),
                            )
                        },
                    )?;
                    aq[g] = cands[best].0;
                }
                a_hat = quant_a(&aq)?;
                trace.push(ev.mean(&all, |s| Ok(Cow::Borrowed(&a_hat[s][..])), |s| Ok(Cow::Borrowed(&b_hat[s][..])))?);
            }

            let cands = b_family.sweeps(&bq).swap_remove(0);
            let (best, obj) = search_best(
                &cands,
                |c| c.1,
                |c| {
                    ev.mean(
                        &all,
                        |s| Ok(Cow::Borrowed(&a_hat[s][..])),
                        |s| {
                            let r = quantize(&c.0, problem.samples[s].rhs.as_ref().expect("validated").data())?;
                            Ok(Cow::Owned(ev.geom.kernel_rhs(&r)))
                        },
                    )
                },
            )?;
            bq = cands[best].0;
            b_hat = quant_b(&bq)?;
            trace.push(obj);
        }
        let lhs = if grouped {
            ActQuant::TimeGrouped {
                params: TimeGroupedParams::new(problem.timesteps, aq)?,
            }
        } else {
            ActQuant::Static { quantizer: aq[0] }
        };
        SiteQuantizer::MatMul {
            lhs,
            rhs: ActQuant::Static { quantizer: bq },
        }
    };

    Ok(SiteReport {
        id: problem.id.clone(),
        kind: problem.kind,
        quantizer,
        objective_init: trace[0],
        objective_final: *trace.last().expect("non-empty trace"),
        trace,
    })
}

/// Mean objective of `quantizer` on `problem` over all samples.
pub fn site_objective(problem: &SiteProblem, quantizer: &SiteQuantizer, kind: ObjectiveKind) -> Result<f64> {
    let ev = Evaluator::new(problem, kind)?;
    let all: Vec<usize> = (0..problem.samples.len()).collect();
    let timesteps: Vec<usize> = problem.samples.iter().map(|s| s.t).collect();
    let act = |q: &ActQuant, s: usize, x: &[f64]| q.apply(x, &timesteps[s..s + 1]).map(Cow::Owned);
    match quantizer {
        SiteQuantizer::FullPrecision => {
            let rhs = |s: usize| -> Result<Cow<[f64]>> {
                Ok(Cow::Owned(match &problem.weight {
                    Some(w) => ev.geom.kernel_rhs(w.data()),
                    None => ev.geom.kernel_rhs(problem.samples[s].rhs.as_ref().expect("validated").data()),
                }))
            };
            ev.mean(&all, |s| Ok(Cow::Borrowed(problem.samples[s].lhs.data())), rhs)
        }
        SiteQuantizer::Linear { weight, input } => {
            let w = problem
                .weight
                .as_ref()
                .ok_or_else(|| Error::Config(format!("site {} has no weight", problem.id)))?;
            let wk = ev.geom.kernel_rhs(weight.apply(w)?.data());
            ev.mean(&all, |s| act(input, s, problem.samples[s].lhs.data()), |_| Ok(Cow::Borrowed(&wk[..])))
        }
        SiteQuantizer::MatMul { lhs, rhs } => ev.mean(
            &all,
            |s| act(lhs, s, problem.samples[s].lhs.data()),
            |s| {
                let r = act(rhs, s, problem.samples[s].rhs.as_ref().ok_or_else(|| {
                    Error::Config(format!("site {} has no right operand", problem.id))
                })?.data())?;
                Ok(Cow::Owned(ev.geom.kernel_rhs(&r)))
            },
        ),
    }
}

/// Site-by-site calibration of a whole model in registry order.
pub fn calibrate(
    model: &DiTModel,
    stats: &LayerStats,
    options: &CalibrationOptions,
) -> Result<(QuantizedModel, CalibrationReport)> {
    options.validate()?;
    if options.time_grouping {
        check_grouping(model.config().timesteps, options.groups)?;
    }
    if stats.sites.len() != model.registry().len() {
        return Err(Error::Calibration(format!(
            "statistics cover {} sites but the model has {}",
            stats.sites.len(),
            model.registry().len()
        )));
    }
    let mut qm = QuantizedModel::new(model.clone());
    let mut reports = Vec::with_capacity(stats.sites.len());
    for (i, site) in model.registry().sites().iter().enumerate() {
        if site.id == "final.linear" && !options.quantize_final_linear {
            reports.push(SiteReport {
                id: site.id.clone(),
                kind: site.kind,
                quantizer: SiteQuantizer::FullPrecision,
                objective_init: 0.0,
                objective_final: 0.0,
                trace: Vec::new(),
            });
            continue;
        }
        let problem = SiteProblem::from_stats(model, &stats.sites[i], i, &stats.timesteps)?;
        let report = calibrate_site(&problem, options)
            .map_err(|e| Error::Calibration(format!("site {}: {e}", site.id)))?;
        qm.assign(i, report.quantizer.clone())?;
        reports.push(report);
    }
    Ok((
        qm,
        CalibrationReport {
            options: options.clone(),
            sites: reports,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::calib::{build_calib_dataset, collect_layer_stats, CalibrationMode};
    use crate::diffusion::{NoiseSchedule, SyntheticDataset};
    use crate::model::DiTConfig;

    fn setup() -> (DiTModel, LayerStats) {
        let c = DiTConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_dim: 8,
            num_blocks: 1,
            num_heads: 2,
            num_classes: 3,
            timesteps: 20,
        };
        let m = DiTModel::random(c.clone(), 9, 0.3).unwrap();
        let s = NoiseSchedule::linear(20, 1e-4, 0.02).unwrap();
        let d = SyntheticDataset::for_model(0, &c).unwrap();
        let ds = build_calib_dataset(&m, &s, &d, 4, 3, CalibrationMode::ForwardCorruption, 1).unwrap();
        let st = collect_layer_stats(&m, &ds).unwrap();
        (m, st)
    }

    fn options(bits: u32, rounds: usize) -> CalibrationOptions {
        CalibrationOptions {
            weight_bits: bits,
            act_bits: bits,
            rounds,
            groups: 4,
            candidates: 20,
            ..CalibrationOptions::default()
        }
    }

    #[test]
    fn traces_never_increase() {
        let (m, st) = setup();
        for bits in [4, 6] {
            let (_, report) = calibrate(&m, &st, &options(bits, 3)).unwrap();
            for s in &report.sites {
                assert!(s.trace.windows(2).all(|w| w[1] <= w[0]), "{}: {:?}", s.id, s.trace);
                assert!(s.objective_final <= s.objective_init);
            }
        }
    }

    #[test]
    fn more_rounds_never_hurt() {
        let (m, st) = setup();
        let (_, one) = calibrate(&m, &st, &options(4, 1)).unwrap();
        let (_, three) = calibrate(&m, &st, &options(4, 3)).unwrap();
        for (a, b) in one.sites.iter().zip(&three.sites) {
            assert!(b.objective_final <= a.objective_final, "{}", a.id);
        }
    }

    #[test]
    fn time_grouping_yields_one_quantizer_per_group() {
        let (m, st) = setup();
        let (qm, _) = calibrate(&m, &st, &options(6, 1)).unwrap();
        let av = m.registry().index_of("blocks.0.attn.av").unwrap();
        match qm.assignment(av) {
            SiteQuantizer::MatMul {
                lhs: ActQuant::TimeGrouped { params },
                ..
            } => assert_eq!(params.num_groups(), 4),
            other => panic!("unexpected assignment {other:?}"),
        }
        let mut flat = options(6, 1);
        flat.time_grouping = false;
        let (qm, _) = calibrate(&m, &st, &flat).unwrap();
        assert!(matches!(
            qm.assignment(av),
            SiteQuantizer::MatMul { lhs: ActQuant::Static { .. }, .. }
        ));
    }

    #[test]
    fn disabled_quantizers_reproduce_full_precision() {
        let (m, st) = setup();
        let (mut qm, _) = calibrate(&m, &st, &options(4, 1)).unwrap();
        let x = Tensor::new(vec![2, 1, 8, 8], (0..128).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let (t, y) = ([3, 17], [0, 2]);
        let fp = m.forward(&x, &t, &y).unwrap();
        assert_ne!(qm.forward(&x, &t, &y).unwrap(), fp);
        qm.set_all_enabled(false);
        assert_eq!(qm.forward(&x, &t, &y).unwrap(), fp);
    }

    #[test]
    fn final_objective_matches_recomputation() {
        let (m, st) = setup();
        let (qm, report) = calibrate(&m, &st, &options(6, 2)).unwrap();
        for (i, s) in report.sites.iter().enumerate() {
            let problem = SiteProblem::from_stats(&m, &st.sites[i], i, &st.timesteps).unwrap();
            let again = site_objective(&problem, qm.assignment(i), ObjectiveKind::Hessian).unwrap();
            assert!((again - s.objective_final).abs() <= 1e-12 * s.objective_final.max(1e-300), "{}", s.id);
        }
    }

    #[test]
    fn skipped_head_stays_full_precision() {
        let (m, st) = setup();
        let mut o = options(6, 1);
        o.quantize_final_linear = false;
        let (qm, _) = calibrate(&m, &st, &o).unwrap();
        let head = m.registry().index_of("final.linear").unwrap();
        assert_eq!(qm.assignment(head), &SiteQuantizer::FullPrecision);
    }
}
