//! Synthetic event-anchored cohort.
//!
//! Every patient carries static features (constant per patient, drawn from a
//! small level set) and oscillating features
//! `base + amp sin(2 pi t / period + phase) + loading * trend(t) + noise`.
//! Each admission has a latent severity `s`. Before the admission the trend
//! is a ramp with slope `pre_slope`, correlated with `s`; from the admission
//! to discharge the ramp continues and a transient bump
//! `shift_amplitude * s * (u/h) e^(1 - u/h)` peaks `h` days after admission,
//! so most of the severity signal sits right next to the event.
//! Outcomes: `mortality ~ Bernoulli(sigmoid(a s + b))` after discharge, and a
//! pre-only `long_stay` label from the stay length, which also grows with `s`.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{
    dataset_from_records, Dataset, EventRecord, OutcomeRecord, RecordKind, RecordValue,
};

pub const ENCOUNTER_FEATURE: &str = "encounter";
pub const MORTALITY_TASK: &str = "mortality";
pub const LONG_STAY_TASK: &str = "long_stay";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeLink {
    pub slope: f64,
    pub intercept: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_patients: usize,
    /// The last static feature is categorical when there are at least two.
    pub n_static_features: usize,
    pub static_cardinality: usize,
    pub n_oscillating_features: usize,
    /// Inclusive range of admissions per patient.
    pub n_events_per_patient: (usize, usize),
    /// Outpatient observations per day.
    pub obs_rate: f64,
    pub inpatient_rate_multiplier: f64,
    pub outpatient_visit_rate: f64,
    /// The first admission falls uniformly in `[history_days / 2, history_days]`.
    pub history_days: f64,
    pub gap_days: (f64, f64),
    pub min_stay_days: f64,
    pub mean_extra_stay_days: f64,
    /// Standard deviation of the latent severity.
    pub trend_shift_scale: f64,
    pub pre_slope_scale: f64,
    pub pre_slope_correlation: f64,
    /// The pre-event ramp starts this many days before admission.
    pub trend_days: f64,
    pub shift_amplitude: f64,
    pub shift_timescale_days: f64,
    pub oscillation_amplitude: f64,
    pub noise_std: f64,
    /// Cohort-wide linear drift of every oscillating feature, per day,
    /// signed by the feature's loading. Zero leaves trajectories stationary
    /// away from admissions.
    pub drift_per_day: f64,
    pub outcome_link: OutcomeLink,
    pub long_stay_days: f64,
    pub followup_days: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            n_static_features: 3,
            static_cardinality: 8,
            n_oscillating_features: 6,
            n_events_per_patient: (1, 2),
            obs_rate: 2.0,
            inpatient_rate_multiplier: 6.0,
            outpatient_visit_rate: 0.02,
            history_days: 40.0,
            gap_days: (20.0, 60.0),
            min_stay_days: 1.5,
            mean_extra_stay_days: 2.5,
            trend_shift_scale: 1.0,
            pre_slope_scale: 0.05,
            pre_slope_correlation: 0.8,
            trend_days: 20.0,
            shift_amplitude: 1.0,
            shift_timescale_days: 0.25,
            oscillation_amplitude: 0.5,
            noise_std: 0.2,
            drift_per_day: 0.0,
            outcome_link: OutcomeLink {
                slope: 3.0,
                intercept: -1.0,
            },
            long_stay_days: 4.0,
            followup_days: 30.0,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive_counts = [
            ("n_patients", self.n_patients),
            ("n_static_features", self.n_static_features),
            ("static_cardinality", self.static_cardinality),
            ("n_oscillating_features", self.n_oscillating_features),
            ("n_events_per_patient.0", self.n_events_per_patient.0),
        ];
        for (name, v) in positive_counts {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if self.n_events_per_patient.1 < self.n_events_per_patient.0 {
            return Err(Error::config("n_events_per_patient range is empty"));
        }
        let positive_reals = [
            ("obs_rate", self.obs_rate),
            ("inpatient_rate_multiplier", self.inpatient_rate_multiplier),
            ("history_days", self.history_days),
            ("min_stay_days", self.min_stay_days),
            ("shift_timescale_days", self.shift_timescale_days),
            ("followup_days", self.followup_days),
            ("trend_days", self.trend_days),
        ];
        for (name, v) in positive_reals {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        let non_negative = [
            ("outpatient_visit_rate", self.outpatient_visit_rate),
            ("mean_extra_stay_days", self.mean_extra_stay_days),
            ("trend_shift_scale", self.trend_shift_scale),
            ("pre_slope_scale", self.pre_slope_scale),
            ("oscillation_amplitude", self.oscillation_amplitude),
            ("noise_std", self.noise_std),
            ("gap_days.0", self.gap_days.0),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !self.drift_per_day.is_finite() {
            return Err(Error::config("drift_per_day must be finite"));
        }
        if self.gap_days.1 < self.gap_days.0 {
            return Err(Error::config("gap_days range is empty"));
        }
        if !(-1.0..=1.0).contains(&self.pre_slope_correlation) {
            return Err(Error::config("pre_slope_correlation must lie in [-1, 1]"));
        }
        Ok(())
    }

    pub fn static_feature_name(&self, k: usize) -> String {
        if self.has_categorical_static() && k + 1 == self.n_static_features {
            "site".to_string()
        } else {
            format!("static_{k}")
        }
    }

    pub fn oscillating_feature_name(k: usize) -> String {
        format!("osc_{k}")
    }

    fn has_categorical_static(&self) -> bool {
        self.n_static_features >= 2
    }
}

/// Latent parameters of one admission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub patient_id: String,
    pub event_time: f64,
    pub severity: f64,
    /// Pre-event ramp slope per day, before feature loadings.
    pub pre_slope: f64,
    /// Initial post-event slope: ramp plus the bump's slope at admission.
    pub post_slope: f64,
}

#[derive(Debug, Clone)]
pub struct Cohort {
    pub records: Vec<EventRecord>,
    pub dataset: Dataset,
    pub outcomes: Vec<OutcomeRecord>,
    pub ground_truth: Vec<GroundTruth>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Independent stream for one patient.
pub fn patient_rng(seed: u64, patient: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(patient as u64);
    rng
}

struct Admission {
    time: f64,
    discharge: f64,
    severity: f64,
    pre_slope: f64,
}

struct Segment {
    start: f64,
    end: f64,
    inpatient: bool,
}

fn round_to(x: f64, step: f64) -> f64 {
    (x / step).round() * step
}

fn poisson_times(rng: &mut ChaCha8Rng, start: f64, end: f64, rate: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let gap = Exp::new(rate).expect("positive rate");
    let mut t = start;
    loop {
        t += gap.sample(rng);
        if t >= end {
            return out;
        }
        out.push(t);
    }
}

fn bump(u: f64, h: f64) -> f64 {
    if u < 0.0 {
        0.0
    } else {
        (u / h) * (1.0 - u / h).exp()
    }
}

/// Severity-driven trend component at time `t` (before feature loadings).
fn trend_at(t: f64, admissions: &[Admission], cfg: &GeneratorConfig) -> f64 {
    let mut total = 0.0;
    for a in admissions {
        let u = t - a.time;
        if u < 0.0 {
            total += a.pre_slope * u.max(-cfg.trend_days);
        } else if t <= a.discharge {
            total += a.pre_slope * u;
        }
        total += cfg.shift_amplitude * a.severity * bump(u, cfg.shift_timescale_days);
    }
    total
}

fn generate_patient(
    cfg: &GeneratorConfig,
    index: usize,
) -> (Vec<EventRecord>, Vec<OutcomeRecord>, Vec<GroundTruth>) {
    let mut rng = patient_rng(cfg.seed, index);
    let pid = format!("p{index:05}");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let statics: Vec<usize> = (0..cfg.n_static_features)
        .map(|_| rng.random_range(0..cfg.static_cardinality))
        .collect();
    let n_osc = cfg.n_oscillating_features;
    let base: Vec<f64> = (0..n_osc).map(|_| normal.sample(&mut rng)).collect();
    let period: Vec<f64> = (0..n_osc).map(|_| rng.random_range(0.5..3.0)).collect();
    let phase: Vec<f64> = (0..n_osc)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let n_events = rng.random_range(cfg.n_events_per_patient.0..=cfg.n_events_per_patient.1);
    let extra_stay = Exp::new(1.0 / cfg.mean_extra_stay_days.max(1e-9)).expect("positive mean");
    let rho = cfg.pre_slope_correlation;
    let mut admissions = Vec::with_capacity(n_events);
    let mut t = rng.random_range(cfg.history_days / 2.0..=cfg.history_days);
    for _ in 0..n_events {
        let z: f64 = normal.sample(&mut rng);
        let eps: f64 = normal.sample(&mut rng);
        let severity = cfg.trend_shift_scale * z;
        let pre_slope = cfg.pre_slope_scale * (rho * z + (1.0 - rho * rho).sqrt() * eps);
        let extra = if cfg.mean_extra_stay_days > 0.0 {
            extra_stay.sample(&mut rng) * (0.3 * z).exp()
        } else {
            0.0
        };
        let stay = cfg.min_stay_days + extra;
        admissions.push(Admission {
            time: t,
            discharge: t + stay,
            severity,
            pre_slope,
        });
        t += stay + rng.random_range(cfg.gap_days.0..=cfg.gap_days.1);
    }
    let end = admissions.last().map_or(t, |a| a.discharge) + cfg.followup_days / 2.0;

    let mut segments = Vec::new();
    let mut cursor = 0.0;
    for a in &admissions {
        segments.push(Segment {
            start: cursor,
            end: a.time,
            inpatient: false,
        });
        segments.push(Segment {
            start: a.time,
            end: a.discharge,
            inpatient: true,
        });
        cursor = a.discharge;
    }
    segments.push(Segment {
        start: cursor,
        end,
        inpatient: false,
    });

    let n_features = cfg.n_static_features + n_osc;
    let mut records = Vec::new();
    let encounter = |time: f64, value: &str, kind: RecordKind| EventRecord {
        patient_id: pid.clone(),
        time,
        feature: ENCOUNTER_FEATURE.to_string(),
        value: RecordValue::Text(value.to_string()),
        kind,
    };
    for seg in &segments {
        let rate = if seg.inpatient {
            cfg.obs_rate * cfg.inpatient_rate_multiplier
        } else {
            cfg.obs_rate
        };
        for time in poisson_times(&mut rng, seg.start, seg.end, rate) {
            let time = round_to(time, 1e-5);
            if time <= seg.start || time >= seg.end {
                continue;
            }
            let f = rng.random_range(0..n_features);
            let (feature, value) = if f < cfg.n_static_features {
                let level = statics[f];
                let value = if cfg.has_categorical_static() && f + 1 == cfg.n_static_features {
                    RecordValue::Text(format!("site_{level}"))
                } else {
                    RecordValue::Number(level as f64)
                };
                (cfg.static_feature_name(f), value)
            } else {
                let k = f - cfg.n_static_features;
                let loading = if k.is_multiple_of(2) { 1.0 } else { -1.0 };
                let osc = base[k]
                    + cfg.oscillation_amplitude
                        * (std::f64::consts::TAU * time / period[k] + phase[k]).sin();
                let noise = cfg.noise_std * normal.sample(&mut rng);
                let trend = trend_at(time, &admissions, cfg) + cfg.drift_per_day * time;
                let v = osc + loading * trend + noise;
                (
                    GeneratorConfig::oscillating_feature_name(k),
                    RecordValue::Number(round_to(v, 1e-4)),
                )
            };
            records.push(EventRecord {
                patient_id: pid.clone(),
                time,
                feature,
                value,
                kind: RecordKind::Obs,
            });
        }
        if !seg.inpatient {
            for time in poisson_times(&mut rng, seg.start, seg.end, cfg.outpatient_visit_rate) {
                let time = round_to(time, 1e-5);
                if time > seg.start && time < seg.end {
                    records.push(encounter(time, "outpatient", RecordKind::Outpatient));
                }
            }
        }
    }

    let mut outcomes = Vec::new();
    let mut truth = Vec::new();
    for a in &admissions {
        let event_time = round_to(a.time, 1e-5);
        let discharge = round_to(a.discharge, 1e-5);
        records.push(encounter(event_time, "admission", RecordKind::Admission));
        records.push(encounter(discharge, "discharge", RecordKind::Discharge));

        let p = sigmoid(cfg.outcome_link.slope * a.severity + cfg.outcome_link.intercept);
        let died = rng.random::<f64>() < p;
        let horizon = cfg.followup_days;
        let time = if died {
            // Sicker patients die sooner; always at least one day after discharge.
            let scale = (horizon - 1.0).max(0.0) / 2.0 * (-0.5 * a.severity).exp();
            let delay: f64 = rng.random::<f64>() * scale;
            discharge + 1.0 + delay.min(horizon - 1.0)
        } else {
            discharge + horizon
        };
        outcomes.push(OutcomeRecord {
            patient_id: pid.clone(),
            task: MORTALITY_TASK.to_string(),
            time: round_to(time, 1e-5),
            value: died as u8,
        });
        outcomes.push(OutcomeRecord {
            patient_id: pid.clone(),
            task: LONG_STAY_TASK.to_string(),
            time: discharge,
            value: (a.discharge - a.time > cfg.long_stay_days) as u8,
        });
        truth.push(GroundTruth {
            patient_id: pid.clone(),
            event_time,
            severity: a.severity,
            pre_slope: a.pre_slope,
            post_slope: a.pre_slope
                + cfg.shift_amplitude * a.severity * std::f64::consts::E
                    / cfg.shift_timescale_days,
        });
    }
    records.sort_by(|a, b| a.time.total_cmp(&b.time));
    (records, outcomes, truth)
}

/// Generates the cohort. Deterministic in the config.
pub fn generate(config: &GeneratorConfig) -> Result<Cohort> {
    config.validate()?;
    let mut records = Vec::new();
    let mut outcomes = Vec::new();
    let mut ground_truth = Vec::new();
    for i in 0..config.n_patients {
        let (r, o, g) = generate_patient(config, i);
        records.extend(r);
        outcomes.extend(o);
        ground_truth.extend(g);
    }
    let dataset = dataset_from_records(&records)?;
    Ok(Cohort {
        records,
        dataset,
        outcomes,
        ground_truth,
    })
}

pub fn write_events<W: Write>(mut out: W, records: &[EventRecord]) -> Result<()> {
    for r in records {
        writeln!(out, "{}", r.to_json_line())?;
    }
    Ok(())
}

pub fn write_outcomes<W: Write>(mut out: W, outcomes: &[OutcomeRecord]) -> Result<()> {
    for o in outcomes {
        writeln!(out, "{}", serde_json::to_string(o)?)?;
    }
    Ok(())
}

pub fn write_ground_truth<W: Write>(mut out: W, truth: &[GroundTruth]) -> Result<()> {
    for g in truth {
        writeln!(out, "{}", serde_json::to_string(g)?)?;
    }
    Ok(())
}
