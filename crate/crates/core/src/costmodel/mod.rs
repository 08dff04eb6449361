//! Analytical end-to-end time and dollar cost of FaaS, IaaS and hybrid training.
//!
//! ```text
//! FaaS(w) = t_F(w) + s/B_S3 + R_F f_F(w) [ (3w-2)(m/w/B_sel + L_sel) + C_F/w ]
//! IaaS(w) = t_I(w) + s/B_S3 + R_I f_I(w) [ (2w-2)(m/w/B_n + L_n) + C_I/w ]
//! ```
//!
//! Sizes are in MB, bandwidths in MB/s, times in seconds. The communication bracket is
//! charged once per synchronization round; `rounds_per_epoch` scales it for algorithms
//! that synchronize more than once per epoch.

mod estimate;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use self::estimate::{estimate_epochs, EstimateSpec};

use crate::clock::Breakdown;
use crate::error::{Error, Result};

/// How a startup table extends below its first measured point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BelowFirst {
    /// `t(first) * w / first`
    Scale,
    /// `t(first)`
    Hold,
}

/// Measured startup times with piecewise-linear interpolation between points and
/// linear extrapolation past the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartupTable {
    /// `(w, seconds)` sorted by `w`.
    pub points: Vec<(usize, f64)>,
    pub below: BelowFirst,
}

impl StartupTable {
    /// Lambda cold start for `w` concurrent functions.
    pub fn faas_default() -> Self {
        StartupTable {
            points: vec![(10, 1.2), (50, 11.0), (100, 18.0), (200, 35.0)],
            below: BelowFirst::Scale,
        }
    }

    /// Time to boot `w` t2.medium VMs.
    pub fn iaas_default() -> Self {
        StartupTable {
            points: vec![(10, 132.0), (50, 160.0), (100, 292.0), (200, 606.0)],
            below: BelowFirst::Hold,
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::invalid(format!("{name}: startup table is empty")));
        }
        if self.points.windows(2).any(|p| p[0].0 >= p[1].0) {
            return Err(Error::invalid(format!(
                "{name}: startup points must be sorted by strictly increasing w"
            )));
        }
        if self.points.iter().any(|p| p.0 == 0 || !(p.1 >= 0.0 && p.1.is_finite())) {
            return Err(Error::invalid(format!(
                "{name}: startup points need w >= 1 and finite seconds >= 0"
            )));
        }
        Ok(())
    }

    pub fn at(&self, w: usize) -> f64 {
        let pts = &self.points;
        let (w0, t0) = pts[0];
        if w <= w0 {
            return match self.below {
                BelowFirst::Scale => t0 * w as f64 / w0 as f64,
                BelowFirst::Hold => t0,
            };
        }
        let seg = pts.windows(2).find(|p| w <= p[1].0).map(|p| (p[0], p[1]));
        let ((wa, ta), (wb, tb)) = match seg {
            Some(s) => s,
            None if pts.len() >= 2 => (pts[pts.len() - 2], pts[pts.len() - 1]),
            None => return t0,
        };
        let slope = (tb - ta) / (wb - wa) as f64;
        (ta + slope * (w - wa) as f64).max(0.0)
    }
}

/// Scaling factor `f(w)` on the epochs to converge. Empty means `f == 1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingCurve {
    pub points: Vec<(usize, f64)>,
}

impl ScalingCurve {
    pub fn at(&self, w: usize) -> f64 {
        let pts = &self.points;
        match pts.iter().position(|p| p.0 >= w) {
            None => pts.last().map_or(1.0, |p| p.1),
            Some(0) => pts[0].1,
            Some(i) => {
                let ((wa, fa), (wb, fb)) = (pts[i - 1], pts[i]);
                fa + (fb - fa) * (w - wa) as f64 / (wb - wa) as f64
            }
        }
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.points.windows(2).any(|p| p[0].0 >= p[1].0) {
            return Err(Error::invalid(format!(
                "{name}: points must be sorted by strictly increasing w"
            )));
        }
        if self.points.iter().any(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(Error::invalid(format!("{name}: factors must be finite and > 0")));
        }
        if (self.at(1) - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!("{name}: f(1) must be 1, got {}", self.at(1))));
        }
        Ok(())
    }
}

/// Storage service FaaS workers communicate through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaasChannel {
    S3,
    Ec,
}

/// Unit prices. The IaaS, parameter-server VM, GPU VM and Memcached node prices are the
/// on-demand prices quoted alongside the measurements; the per-worker FaaS price is the
/// Lambda 3 GB list price and should be overridden for other memory sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pricing {
    pub faas_usd_per_worker_hour: f64,
    /// IaaS worker (t2.medium).
    pub vm_usd_per_hour: f64,
    /// Parameter-server VM of the hybrid design (c5.4xlarge).
    pub ps_vm_usd_per_hour: f64,
    /// g3s.xlarge, for GPU what-ifs.
    pub gpu_vm_usd_per_hour: f64,
    /// ElastiCache Memcached node (cache.t3.small).
    pub ec_usd_per_hour: f64,
}

impl Default for Pricing {
    fn default() -> Self {
        Pricing {
            faas_usd_per_worker_hour: 0.176,
            vm_usd_per_hour: 0.0464,
            ps_vm_usd_per_hour: 0.68,
            gpu_vm_usd_per_hour: 0.75,
            ec_usd_per_hour: 0.034,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Infra {
    Faas,
    Iaas,
    /// FaaS workers plus one parameter-server VM.
    Hybrid,
}

impl Infra {
    pub fn name(&self) -> &'static str {
        match self {
            Infra::Faas => "faas",
            Infra::Iaas => "iaas",
            Infra::Hybrid => "hybrid",
        }
    }
}

/// Dollar cost of running `w` workers for `time_s` seconds.
///
/// Workers are billed per second. `extras_usd_per_hour` covers always-on services
/// (cache node, parameter-server VM), billed per started second.
pub fn dollar_cost(time_s: f64, w: usize, pricing: &Pricing, infra: Infra, extras_usd_per_hour: f64) -> f64 {
    let t = time_s.max(0.0);
    let workers = match infra {
        Infra::Faas | Infra::Hybrid => w as f64 * t * pricing.faas_usd_per_worker_hour / 3600.0,
        Infra::Iaas => w as f64 * t * pricing.vm_usd_per_hour / 3600.0,
    };
    let ps = if infra == Infra::Hybrid {
        pricing.ps_vm_usd_per_hour
    } else {
        0.0
    };
    workers + (extras_usd_per_hour + ps) * t.ceil() / 3600.0
}

/// Every symbol of the two model equations plus the hybrid link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostModelParams {
    /// Dataset size, MB.
    pub s: f64,
    /// Model size, MB.
    pub m: f64,
    pub w: usize,
    pub t_faas: StartupTable,
    pub t_iaas: StartupTable,
    pub b_s3: f64,
    pub b_ebs: f64,
    pub b_n: f64,
    pub b_ec: f64,
    pub l_s3: f64,
    pub l_ebs: f64,
    pub l_n: f64,
    pub l_ec: f64,
    /// Epochs to converge at w = 1.
    pub r_faas: f64,
    pub r_iaas: f64,
    pub f_faas: ScalingCurve,
    pub f_iaas: ScalingCurve,
    /// Single-worker seconds per epoch.
    pub c_faas: f64,
    pub c_iaas: f64,
    pub channel: FaasChannel,
    /// Worker-to-parameter-server link.
    pub b_ps: f64,
    pub l_ps: f64,
    pub rounds_per_epoch: f64,
    /// Startup of the communication service, overlapped with worker startup.
    pub channel_startup_s: f64,
    pub pricing: Pricing,
}

impl Default for CostModelParams {
    /// Logistic regression on an 8 GB dataset with a 224-byte model over S3. `r_*` and
    /// `c_*` are placeholders to be replaced by estimates.
    fn default() -> Self {
        CostModelParams {
            s: 8000.0,
            m: 224e-6,
            w: 10,
            t_faas: StartupTable::faas_default(),
            t_iaas: StartupTable::iaas_default(),
            b_s3: 65.0,
            b_ebs: 1950.0,
            b_n: 120.0,
            b_ec: 630.0,
            l_s3: 8e-2,
            l_ebs: 3e-5,
            l_n: 5e-4,
            l_ec: 1e-2,
            r_faas: 10.0,
            r_iaas: 10.0,
            f_faas: ScalingCurve::default(),
            f_iaas: ScalingCurve::default(),
            c_faas: 100.0,
            c_iaas: 100.0,
            channel: FaasChannel::S3,
            b_ps: 75.0 / 1.85,
            l_ps: 1.5e-4,
            rounds_per_epoch: 1.0,
            channel_startup_s: 0.0,
            pricing: Pricing::default(),
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 {
            return Err(Error::invalid("costmodel: w must be >= 1"));
        }
        let rates = [
            ("b_s3", self.b_s3),
            ("b_ebs", self.b_ebs),
            ("b_n", self.b_n),
            ("b_ec", self.b_ec),
            ("b_ps", self.b_ps),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("costmodel: {name} must be > 0, got {v}")));
            }
        }
        let nonneg = [
            ("s", self.s),
            ("m", self.m),
            ("l_s3", self.l_s3),
            ("l_ebs", self.l_ebs),
            ("l_n", self.l_n),
            ("l_ec", self.l_ec),
            ("l_ps", self.l_ps),
            ("r_faas", self.r_faas),
            ("r_iaas", self.r_iaas),
            ("c_faas", self.c_faas),
            ("c_iaas", self.c_iaas),
            ("rounds_per_epoch", self.rounds_per_epoch),
            ("channel_startup_s", self.channel_startup_s),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!(
                    "costmodel: {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        self.t_faas.validate("t_faas")?;
        self.t_iaas.validate("t_iaas")?;
        self.f_faas.validate("f_faas")?;
        self.f_iaas.validate("f_iaas")
    }

    fn faas_link(&self) -> (f64, f64) {
        match self.channel {
            FaasChannel::S3 => (self.b_s3, self.l_s3),
            FaasChannel::Ec => (self.b_ec, self.l_ec),
        }
    }

    fn extras_usd_per_hour(&self, infra: Infra) -> f64 {
        match (infra, self.channel) {
            (Infra::Faas, FaasChannel::Ec) => self.pricing.ec_usd_per_hour,
            _ => 0.0,
        }
    }
}

fn assemble(
    startup: f64,
    loading: f64,
    epochs: f64,
    comm_per_round: f64,
    rounds: f64,
    compute_per_epoch: f64,
) -> Breakdown {
    let mut b = Breakdown {
        startup_s: startup,
        loading_s: loading,
        communication_s: epochs * rounds * comm_per_round,
        compute_s: epochs * compute_per_epoch,
        total_s: 0.0,
    };
    b.total_s = b.phase_sum();
    b
}

/// `FaaS(w)` with its four terms.
pub fn faas_time(p: &CostModelParams) -> Result<Breakdown> {
    p.validate()?;
    let w = p.w as f64;
    let (b, l) = p.faas_link();
    Ok(assemble(
        p.t_faas.at(p.w).max(p.channel_startup_s),
        p.s / p.b_s3,
        p.r_faas * p.f_faas.at(p.w),
        (3.0 * w - 2.0) * (p.m / w / b + l),
        p.rounds_per_epoch,
        p.c_faas / w,
    ))
}

/// `IaaS(w)` with its four terms.
pub fn iaas_time(p: &CostModelParams) -> Result<Breakdown> {
    p.validate()?;
    let w = p.w as f64;
    Ok(assemble(
        p.t_iaas.at(p.w),
        p.s / p.b_s3,
        p.r_iaas * p.f_iaas.at(p.w),
        (2.0 * w - 2.0) * (p.m / w / p.b_n + p.l_n),
        p.rounds_per_epoch,
        p.c_iaas / w,
    ))
}

/// FaaS workers around one parameter-server VM: a push and a pull per worker per round
/// over the worker-to-VM link; the VM boots alongside the functions.
pub fn hybrid_time(p: &CostModelParams) -> Result<Breakdown> {
    p.validate()?;
    let w = p.w as f64;
    Ok(assemble(
        p.t_faas.at(p.w).max(p.t_iaas.at(1)),
        p.s / p.b_s3,
        p.r_faas * p.f_faas.at(p.w),
        2.0 * w * (p.m / w / p.b_ps + p.l_ps),
        p.rounds_per_epoch,
        p.c_faas / w,
    ))
}

pub fn variant_time(p: &CostModelParams, infra: Infra) -> Result<Breakdown> {
    match infra {
        Infra::Faas => faas_time(p),
        Infra::Iaas => iaas_time(p),
        Infra::Hybrid => hybrid_time(p),
    }
}

pub fn variant_cost(p: &CostModelParams, infra: Infra, time_s: f64) -> f64 {
    dollar_cost(time_s, p.w, &p.pricing, infra, p.extras_usd_per_hour(infra))
}

pub const SCENARIOS: [&str; 3] = ["baseline", "hybrid_fast_link", "hot_data"];

/// A what-if: substitutions applied to the parameters before evaluating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Replaces the worker-to-VM link bandwidth (MB/s).
    pub link_bandwidth_mbps: Option<f64>,
    pub link_latency_s: Option<f64>,
    /// The dataset sits on a VM: FaaS and hybrid load it over the VM link, IaaS from
    /// its local EBS volume.
    pub hot_data: bool,
    pub include_hybrid: bool,
}

impl Scenario {
    pub fn named(name: &str) -> Result<Scenario> {
        let base = Scenario {
            name: name.to_string(),
            link_bandwidth_mbps: None,
            link_latency_s: None,
            hot_data: false,
            include_hybrid: false,
        };
        match name {
            "baseline" => Ok(base),
            "hybrid_fast_link" => Ok(Scenario {
                link_bandwidth_mbps: Some(10_000.0),
                include_hybrid: true,
                ..base
            }),
            "hot_data" => Ok(Scenario {
                hot_data: true,
                include_hybrid: true,
                ..base
            }),
            other => Err(Error::invalid(format!(
                "unknown scenario {other:?}; valid scenarios: {}",
                SCENARIOS.join(", ")
            ))),
        }
    }

    pub fn variants(&self) -> Vec<Infra> {
        if self.include_hybrid {
            vec![Infra::Faas, Infra::Iaas, Infra::Hybrid]
        } else {
            vec![Infra::Faas, Infra::Iaas]
        }
    }

    pub fn apply(&self, p: &CostModelParams) -> CostModelParams {
        let mut q = p.clone();
        if let Some(b) = self.link_bandwidth_mbps {
            q.b_ps = b;
        }
        if let Some(l) = self.link_latency_s {
            q.l_ps = l;
        }
        q
    }

    /// Evaluates one variant under this scenario.
    pub fn evaluate(&self, p: &CostModelParams, infra: Infra) -> Result<(Breakdown, f64)> {
        let q = self.apply(p);
        let mut b = variant_time(&q, infra)?;
        if self.hot_data {
            b.loading_s = match infra {
                Infra::Iaas => q.s / q.b_ebs,
                Infra::Faas | Infra::Hybrid => q.s / q.b_ps,
            };
            b.total_s = b.phase_sum();
        }
        let cost = variant_cost(&q, infra, b.total_s);
        Ok((b, cost))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Infra,
    pub breakdown: Breakdown,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfReport {
    pub scenario: String,
    pub w: usize,
    pub variants: Vec<VariantResult>,
}

pub fn whatif(scenario: &Scenario, p: &CostModelParams) -> Result<WhatIfReport> {
    let variants = scenario
        .variants()
        .into_iter()
        .map(|infra| {
            let (breakdown, cost_usd) = scenario.evaluate(p, infra)?;
            Ok(VariantResult {
                variant: infra,
                breakdown,
                cost_usd,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WhatIfReport {
        scenario: scenario.name.clone(),
        w: p.w,
        variants,
    })
}

/// One grid cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub config: String,
    pub w: usize,
    pub time_s: f64,
    pub cost_usd: f64,
    pub breakdown: Breakdown,
    /// No other row of the same config is at least as fast and as cheap and strictly
    /// better in one of the two.
    pub pareto: bool,
}

pub const SWEEP_HEADER: &str = "config,w,time_s,cost_usd,startup_s,loading_s,comm_s,compute_s,pareto";

/// Evaluates every variant of `scenario` at every `w`.
pub fn sweep(p: &CostModelParams, w_values: &[usize], scenario: &Scenario) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for infra in scenario.variants() {
        for &w in w_values {
            let q = CostModelParams { w, ..p.clone() };
            let (b, cost) = scenario.evaluate(&q, infra)?;
            rows.push(SweepRow {
                config: infra.name().to_string(),
                w,
                time_s: b.total_s,
                cost_usd: cost,
                breakdown: b,
                pareto: false,
            });
        }
    }
    mark_pareto(&mut rows);
    Ok(rows)
}

pub fn mark_pareto(rows: &mut [SweepRow]) {
    let flags: Vec<bool> = rows
        .iter()
        .map(|r| {
            !rows.iter().any(|o| {
                o.config == r.config
                    && o.time_s <= r.time_s
                    && o.cost_usd <= r.cost_usd
                    && (o.time_s < r.time_s || o.cost_usd < r.cost_usd)
            })
        })
        .collect();
    for (r, f) in rows.iter_mut().zip(flags) {
        r.pareto = f;
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let b = &r.breakdown;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.config, r.w, r.time_s, r.cost_usd, b.startup_s, b.loading_s, b.communication_s, b.compute_s, r.pareto
        );
    }
    out
}
