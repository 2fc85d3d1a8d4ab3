//! Forecasting pretraining: from observations before a window, predict the
//! z-normalised value of each feature first observed inside the window.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::encoder::Dense;
use crate::error::{Error, Result};
use crate::event_stream::Observation;
use crate::featurizer::{encode_with_times, BoundVocab, TokenRow};

pub const MIN_INPUTS: usize = 16;
pub const MAX_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastExample {
    pub input: TokenRow,
    /// Vocabulary feature id to z-normalised target, first observation only.
    pub targets: BTreeMap<u32, f64>,
    pub window_start: f64,
}

/// Continuous targets in `[start, start + len)`: first observation per feature.
pub fn forecast_targets(
    observations: &[Observation],
    start: f64,
    len: f64,
    vocab: &BoundVocab,
) -> BTreeMap<u32, f64> {
    let mut targets = BTreeMap::new();
    for o in observations {
        if o.time < start || o.time >= start + len {
            continue;
        }
        if let Some(tok) = vocab.token(o.feature_id, &o.value) {
            if tok.is_cont {
                targets.entry(tok.feature_id).or_insert(tok.cont_value);
            }
        }
    }
    targets
}

/// Samples a forecast window start among observation times with at least
/// [`MIN_INPUTS`] observations before it. Inputs are the `max_len` most
/// recent earlier observations, timed relative to the last of them.
pub fn strats_make_example(
    observations: &[Observation],
    vocab: &BoundVocab,
    window_len_days: f64,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Option<ForecastExample> {
    let n = observations.len();
    if n <= MIN_INPUTS {
        return None;
    }
    for _ in 0..MAX_ATTEMPTS {
        let p = rng.random_range(MIN_INPUTS..n);
        let start = observations[p].time;
        // Everything strictly earlier than the window is history.
        let end = observations.partition_point(|o| o.time < start);
        if end < MIN_INPUTS {
            continue;
        }
        let lo = end.saturating_sub(max_len);
        let history = &observations[lo..end];
        let anchor = history[history.len() - 1].time;
        let rel: Vec<f64> = history.iter().map(|o| o.time - anchor).collect();
        let Some(input) = encode_with_times(history, &rel, vocab, max_len, MIN_INPUTS) else {
            continue;
        };
        let targets = forecast_targets(&observations[end..], start, window_len_days, vocab);
        if targets.is_empty() {
            continue;
        }
        return Some(ForecastExample {
            input,
            targets,
            window_start: start,
        });
    }
    None
}

/// Mean squared error over observed targets only. `pred` is
/// `[B, n_feature_ids]`, indexed by vocabulary feature id.
pub fn strats_loss(tape: &mut Tape, pred: Var, targets: &[&BTreeMap<u32, f64>]) -> Result<Var> {
    let (b, width) = tape.shape(pred);
    if targets.len() != b {
        return Err(Error::Shape(format!("{} target sets for {b} predictions", targets.len())));
    }
    let mut target = Array2::zeros((b, width));
    let mut mask = Array2::zeros((b, width));
    for (i, t) in targets.iter().enumerate() {
        for (&f, &v) in t.iter() {
            let f = f as usize;
            if f >= width {
                return Err(Error::Shape(format!("target feature {f} outside head width {width}")));
            }
            target[[i, f]] = v;
            mask[[i, f]] = 1.0;
        }
    }
    if mask.sum() == 0.0 {
        return Err(Error::invalid("forecast batch has no targets"));
    }
    Ok(tape.masked_squared_error(pred, target, mask))
}

/// Forecast head output `[B, n_feature_ids]`.
pub fn strats_predict(tape: &mut Tape, embedding: Var, head: &Dense) -> Var {
    head.apply(tape, embedding)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;
    use crate::event_stream::{Dataset, PatientTrajectory, Value};
    use crate::featurizer::{build_vocabulary, VocabConfig, Vocabulary};
    use rand::SeedableRng;

    fn loss_of(pred: Array2<f64>, targets: Vec<BTreeMap<u32, f64>>) -> Result<f64> {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let p = tape.constant(pred);
        let refs: Vec<&BTreeMap<u32, f64>> = targets.iter().collect();
        let l = strats_loss(&mut tape, p, &refs)?;
        Ok(tape.scalar(l))
    }

    #[test]
    fn loss_examples() {
        let exact = loss_of(
            Array2::from_shape_vec((1, 3), vec![0.0, 1.5, -2.0]).unwrap(),
            vec![BTreeMap::from([(1, 1.5), (2, -2.0)])],
        )
        .unwrap();
        assert_eq!(exact, 0.0);
        let single = loss_of(Array2::zeros((1, 3)), vec![BTreeMap::from([(1, 2.0)])]).unwrap();
        assert_eq!(single, 4.0);
        let two = loss_of(
            Array2::zeros((1, 3)),
            vec![BTreeMap::from([(1, 1.0), (2, 3.0)])],
        )
        .unwrap();
        assert_eq!(two, 5.0);
        assert!(loss_of(Array2::zeros((1, 3)), vec![BTreeMap::new()]).is_err());
    }

    fn fixture(obs: Vec<Observation>) -> (Dataset, Vocabulary) {
        let ds = Dataset {
            features: vec!["potassium".into(), "sodium".into()],
            categories: vec![],
            trajectories: vec![PatientTrajectory::new("p", obs).unwrap()],
        };
        let v = build_vocabulary(&ds, &[], &VocabConfig { min_count: Some(1) }).unwrap();
        (ds, v)
    }

    #[test]
    fn window_boundary_is_half_open() {
        let obs = vec![
            Observation::new(0.0, 1, Value::Continuous(1.0)),
            Observation::new(5.9, 0, Value::Continuous(4.2)),
            Observation::new(6.1, 1, Value::Continuous(3.0)),
        ];
        let (ds, v) = fixture(obs.clone());
        let bound = v.bind(&ds);
        let t = forecast_targets(&obs, 0.0, 6.0, &bound);
        let potassium = v.feature("potassium").unwrap();
        let sodium = v.feature("sodium").unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[&potassium.id], (4.2 - potassium.mean) / potassium.std);
        // sodium at 0.0 is inside, at 6.1 outside: first observation wins.
        assert_eq!(t[&sodium.id], (1.0 - sodium.mean) / sodium.std);
        let later = forecast_targets(&obs, 0.5, 5.5, &bound);
        assert_eq!(later.len(), 1);
        assert!(later.contains_key(&potassium.id));
    }

    #[test]
    fn fifteen_observations_rejected() {
        let obs: Vec<Observation> = (0..15)
            .map(|i| Observation::new(i as f64, 0, Value::Continuous(1.0)))
            .collect();
        let (ds, v) = fixture(obs);
        let bound = v.bind(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(strats_make_example(ds.trajectories[0].observations(), &bound, 6.0, 512, &mut rng).is_none());
    }

    #[test]
    fn example_inputs_precede_window() {
        let obs: Vec<Observation> = (0..60)
            .map(|i| Observation::new(i as f64 * 0.5, (i % 2) as u32, Value::Continuous(i as f64)))
            .collect();
        let (ds, v) = fixture(obs);
        let bound = v.bind(&ds);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let ex = strats_make_example(ds.trajectories[0].observations(), &bound, 2.0, 20, &mut rng).unwrap();
            assert!(ex.input.len() >= MIN_INPUTS && ex.input.len() <= 20);
            assert_eq!(*ex.input.times.last().unwrap(), 0.0);
            assert!(ex.input.times.iter().all(|t| *t <= 0.0));
            assert!(!ex.targets.is_empty());
        }
    }
}
