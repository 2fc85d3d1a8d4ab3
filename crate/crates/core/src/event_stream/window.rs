use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{EventKind, IndexEvent, Observation, OutcomeRecord, PatientTrajectory, RecordKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Maximum observations per side.
    pub tau: usize,
    /// Minimum observations per side; shorter sides reject the event.
    pub min_len: usize,
    /// Observations dropped immediately before the event.
    pub censor_pre: usize,
    /// Observations dropped at and immediately after the event.
    pub censor_post: usize,
    /// For admission events, end the post window at the next discharge
    /// record (inclusive).
    pub stop_at_discharge: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            tau: 512,
            min_len: 16,
            censor_pre: 0,
            censor_post: 0,
            stop_at_discharge: true,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_len == 0 || self.tau < self.min_len {
            return Err(Error::config(format!(
                "window requires tau >= min_len >= 1 (tau {}, min_len {})",
                self.tau, self.min_len
            )));
        }
        Ok(())
    }
}

/// Pre-event and post-event windows around one index event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowPair {
    pub pre: Vec<Observation>,
    pub post: Vec<Observation>,
    pub event: IndexEvent,
    /// Trajectory positions covered by `pre` and `post`.
    pub pre_range: Range<usize>,
    pub post_range: Range<usize>,
    pub labels: BTreeMap<String, u8>,
}

impl WindowPair {
    pub fn patient_id(&self) -> &str {
        &self.event.patient_id
    }

    pub fn last_pre_time(&self) -> f64 {
        self.pre.last().map_or(self.event.time, |o| o.time)
    }

    pub fn last_post_time(&self) -> f64 {
        self.post.last().map_or(self.event.time, |o| o.time)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Extraction {
    Pair(WindowPair),
    Rejected { pre_len: usize, post_len: usize },
}

impl Extraction {
    pub fn pair(self) -> Option<WindowPair> {
        match self {
            Extraction::Pair(p) => Some(p),
            Extraction::Rejected { .. } => None,
        }
    }
}

/// Cuts the pre window `[j-tau, j)` and post window `[j, j+tau)` around the
/// event at position `j`, after removing the censored observations adjacent
/// to the event.
pub fn extract_window_pair(
    trajectory: &PatientTrajectory,
    event: &IndexEvent,
    config: &WindowConfig,
) -> Result<Extraction> {
    config.validate()?;
    let obs = trajectory.observations();
    let j = event.position;
    if j >= obs.len() || obs[j].time != event.time {
        return Err(Error::invalid(format!(
            "event at position {j} does not match trajectory of {}",
            trajectory.patient_id
        )));
    }

    let mut post_end = obs.len();
    if config.stop_at_discharge && event.kind == EventKind::Admission {
        if let Some(d) = obs[j..].iter().position(|o| o.kind == RecordKind::Discharge) {
            post_end = j + d + 1;
        }
    }

    let pre_end = j.saturating_sub(config.censor_pre);
    let pre_start = pre_end.saturating_sub(config.tau);
    let post_start = (j + config.censor_post).min(post_end);
    let post_stop = (post_start + config.tau).min(post_end);

    let pre_len = pre_end - pre_start;
    let post_len = post_stop - post_start;
    if pre_len < config.min_len || post_len < config.min_len {
        return Ok(Extraction::Rejected { pre_len, post_len });
    }
    Ok(Extraction::Pair(WindowPair {
        pre: obs[pre_start..pre_end].to_vec(),
        post: obs[post_start..post_stop].to_vec(),
        event: event.clone(),
        pre_range: pre_start..pre_end,
        post_range: post_start..post_stop,
        labels: BTreeMap::new(),
    }))
}

/// Which windows a downstream task consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    #[default]
    Both,
    PreOnly,
    PostOnly,
}

/// Leakage policy: labels must be defined at least `min_gap_days` after the
/// last observation the task consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageRule {
    pub tasks: BTreeMap<String, InputMode>,
    pub min_gap_days: f64,
}

impl LeakageRule {
    pub fn new<'a>(tasks: impl IntoIterator<Item = (&'a str, InputMode)>) -> Self {
        Self {
            tasks: tasks
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            min_gap_days: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Labeling {
    Labeled(WindowPair),
    Excluded,
}

/// The earliest outcome of each task at or after the event time.
pub fn outcomes_for_event(
    records: &[OutcomeRecord],
    event_time: f64,
) -> BTreeMap<String, (f64, u8)> {
    let mut out: BTreeMap<String, (f64, u8)> = BTreeMap::new();
    for r in records {
        if r.time < event_time {
            continue;
        }
        let entry = out.entry(r.task.clone()).or_insert((r.time, r.value));
        if r.time < entry.0 {
            *entry = (r.time, r.value);
        }
    }
    out
}

/// Attaches every outcome that respects the leakage rule. The pair is
/// excluded when no task survives.
pub fn attach_labels(
    mut pair: WindowPair,
    outcomes: &BTreeMap<String, (f64, u8)>,
    rule: &LeakageRule,
) -> Result<Labeling> {
    for (task, &(time, value)) in outcomes {
        let mode = rule
            .tasks
            .get(task)
            .ok_or_else(|| Error::config(format!("unknown task {task:?}")))?;
        let last_input = match mode {
            InputMode::PreOnly => pair.last_pre_time(),
            InputMode::Both | InputMode::PostOnly => pair.last_post_time(),
        };
        if time >= last_input + rule.min_gap_days {
            pair.labels.insert(task.clone(), value);
        }
    }
    if pair.labels.is_empty() {
        Ok(Labeling::Excluded)
    } else {
        Ok(Labeling::Labeled(pair))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::Value;
    use proptest::prelude::*;

    fn trajectory(n_pre: usize, n_post: usize) -> (PatientTrajectory, IndexEvent) {
        let mut obs = Vec::new();
        for i in 0..n_pre {
            obs.push(Observation::new(i as f64, 0, Value::Continuous(i as f64)));
        }
        obs.push(
            Observation::new(n_pre as f64, 1, Value::Categorical(0))
                .with_kind(RecordKind::Admission),
        );
        for i in 1..n_post {
            obs.push(Observation::new(
                (n_pre + i) as f64,
                0,
                Value::Continuous(-(i as f64)),
            ));
        }
        let traj = PatientTrajectory::new("p", obs).unwrap();
        let ev = IndexEvent::at(&traj, n_pre, EventKind::Admission).unwrap();
        (traj, ev)
    }

    fn cfg(tau: usize, min_len: usize, censor_pre: usize, censor_post: usize) -> WindowConfig {
        WindowConfig {
            tau,
            min_len,
            censor_pre,
            censor_post,
            stop_at_discharge: true,
        }
    }

    #[test]
    fn fifteen_pre_observations_rejected() {
        let (t, e) = trajectory(15, 40);
        let out = extract_window_pair(&t, &e, &WindowConfig::default()).unwrap();
        assert_eq!(
            out,
            Extraction::Rejected {
                pre_len: 15,
                post_len: 40
            }
        );
    }

    #[test]
    fn long_history_keeps_nearest_tau() {
        let (t, e) = trajectory(600, 20);
        let pair = extract_window_pair(&t, &e, &WindowConfig::default())
            .unwrap()
            .pair()
            .unwrap();
        assert_eq!(pair.pre.len(), 512);
        assert_eq!(pair.pre_range, 88..600);
        assert!(pair.pre.windows(2).all(|w| w[0].time <= w[1].time));
        assert_eq!(pair.post.len(), 20);
    }

    #[test]
    fn censoring_drops_adjacent_then_takes_nearest() {
        // p1..p6 occupy positions 0..6; censor_pre=2 drops p5,p6 and tau=3
        // keeps p2,p3,p4.
        let (t, e) = trajectory(6, 10);
        let pair = extract_window_pair(&t, &e, &cfg(3, 1, 2, 0))
            .unwrap()
            .pair()
            .unwrap();
        assert_eq!(pair.pre_range, 1..4);
        let times: Vec<f64> = pair.pre.iter().map(|o| o.time).collect();
        assert_eq!(times, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn censor_post_skips_event_and_followers() {
        let (t, e) = trajectory(10, 10);
        let pair = extract_window_pair(&t, &e, &cfg(4, 1, 0, 3))
            .unwrap()
            .pair()
            .unwrap();
        assert_eq!(pair.post_range, 13..17);
    }

    #[test]
    fn post_window_stops_at_discharge_inclusive() {
        let mut obs: Vec<Observation> = (0..20)
            .map(|i| Observation::new(i as f64, 0, Value::Continuous(0.0)))
            .collect();
        obs.push(Observation::new(20.0, 1, Value::Categorical(0)).with_kind(RecordKind::Admission));
        for i in 21..40 {
            obs.push(Observation::new(i as f64, 0, Value::Continuous(0.0)));
        }
        obs.push(Observation::new(40.0, 1, Value::Categorical(0)).with_kind(RecordKind::Discharge));
        for i in 41..60 {
            obs.push(Observation::new(i as f64, 0, Value::Continuous(0.0)));
        }
        let t = PatientTrajectory::new("p", obs).unwrap();
        let e = IndexEvent::at(&t, 20, EventKind::Admission).unwrap();
        let pair = extract_window_pair(&t, &e, &cfg(512, 16, 0, 0))
            .unwrap()
            .pair()
            .unwrap();
        assert_eq!(pair.post_range, 20..41);
        assert_eq!(pair.post.last().unwrap().kind, RecordKind::Discharge);
    }

    fn labeled_pair() -> WindowPair {
        let (t, e) = trajectory(20, 20);
        extract_window_pair(&t, &e, &cfg(16, 16, 0, 0))
            .unwrap()
            .pair()
            .unwrap()
    }

    #[test]
    fn leakage_rule_for_both_windows() {
        let rule = LeakageRule::new([("mortality", InputMode::Both)]);
        let pair = labeled_pair();
        let last = pair.last_post_time();
        let early = BTreeMap::from([("mortality".to_string(), (last + 0.5, 1))]);
        assert_eq!(
            attach_labels(pair.clone(), &early, &rule).unwrap(),
            Labeling::Excluded
        );
        let late = BTreeMap::from([("mortality".to_string(), (last + 2.0, 1))]);
        match attach_labels(pair, &late, &rule).unwrap() {
            Labeling::Labeled(p) => assert_eq!(p.labels["mortality"], 1),
            Labeling::Excluded => panic!("expected label"),
        }
    }

    #[test]
    fn pre_only_task_uses_pre_boundary() {
        let rule = LeakageRule::new([("los", InputMode::PreOnly)]);
        let pair = labeled_pair();
        let t = pair.last_pre_time() + 1.5;
        assert!(t < pair.last_post_time());
        let outcomes = BTreeMap::from([("los".to_string(), (t, 0))]);
        assert!(matches!(
            attach_labels(pair, &outcomes, &rule).unwrap(),
            Labeling::Labeled(_)
        ));
    }

    #[test]
    fn unknown_task_is_config_error() {
        let rule = LeakageRule::new([("los", InputMode::PreOnly)]);
        let outcomes = BTreeMap::from([("nope".to_string(), (1e9, 0))]);
        assert!(matches!(
            attach_labels(labeled_pair(), &outcomes, &rule),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn earliest_outcome_after_event() {
        let recs = vec![
            OutcomeRecord {
                patient_id: "p".into(),
                task: "m".into(),
                time: 1.0,
                value: 1,
            },
            OutcomeRecord {
                patient_id: "p".into(),
                task: "m".into(),
                time: 9.0,
                value: 0,
            },
            OutcomeRecord {
                patient_id: "p".into(),
                task: "m".into(),
                time: 5.0,
                value: 1,
            },
        ];
        assert_eq!(outcomes_for_event(&recs, 2.0)["m"], (5.0, 1));
    }

    proptest! {
        #[test]
        fn uncensored_windows_are_contiguous_around_event(
            n_pre in 0usize..80, n_post in 1usize..80, tau in 1usize..40, min_len in 1usize..10,
        ) {
            prop_assume!(tau >= min_len);
            let (t, e) = trajectory(n_pre, n_post);
            let c = WindowConfig { tau, min_len, censor_pre: 0, censor_post: 0, stop_at_discharge: false };
            match extract_window_pair(&t, &e, &c).unwrap() {
                Extraction::Pair(p) => {
                    prop_assert_eq!(p.pre_range.end, e.position);
                    prop_assert_eq!(p.post_range.start, e.position);
                    let joined: Vec<_> = p.pre.iter().chain(&p.post).cloned().collect();
                    prop_assert_eq!(&joined[..], &t.observations()[p.pre_range.start..p.post_range.end]);
                    prop_assert!(p.pre.iter().all(|o| o.time <= e.time));
                    prop_assert!(p.post.iter().all(|o| o.time >= e.time));
                }
                Extraction::Rejected { pre_len, post_len } => {
                    prop_assert!(pre_len < min_len || post_len < min_len);
                }
            }
        }
    }
}
