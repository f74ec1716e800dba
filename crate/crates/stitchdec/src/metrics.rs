//! Simulated-clock latency accounting.
//!
//! Decoding against a streaming input is measured on a simulated clock:
//! blocks arrive at their audio cadence, every decode step costs a fixed
//! number of milliseconds, and the decoder records an event timeline as it
//! works. From those timelines this module derives endpoint latency (time
//! from the end of the audio to the emission of `<eos>`), real-time factor,
//! and how many steps ran after the last block arrived. The clock being
//! simulated keeps every number bit-reproducible across machines; an
//! optional wall-clock override exists for real compute measurements.

use serde::Serialize;

use crate::error::{Error, Result};

/// What happened at one instant of the decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    BlockArrival { block: usize },
    StepCommitted { step: usize, block: usize },
    StepDiscarded { step: usize, block: usize },
    EosEmitted,
    UtteranceEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelineEvent {
    pub time_ms: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Time-ordered event record of one utterance's decode.
///
/// Holds exactly one `UtteranceEnd` (the moment the audio ran out) and at
/// most one `EosEmitted`, which never precedes it.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct DecodeTimeline {
    events: Vec<TimelineEvent>,
}

impl DecodeTimeline {
    pub fn new(mut events: Vec<TimelineEvent>) -> Result<Self> {
        for ev in &events {
            if !ev.time_ms.is_finite() || ev.time_ms < 0.0 {
                return Err(Error::InvalidMetrics(format!(
                    "event time {} must be finite and nonnegative",
                    ev.time_ms
                )));
            }
        }
        let ends: Vec<f64> = events
            .iter()
            .filter(|e| e.kind == EventKind::UtteranceEnd)
            .map(|e| e.time_ms)
            .collect();
        if ends.len() != 1 {
            return Err(Error::InvalidMetrics(format!(
                "timeline needs exactly one utterance_end, got {}",
                ends.len()
            )));
        }
        let eos: Vec<f64> =
            events.iter().filter(|e| e.kind == EventKind::EosEmitted).map(|e| e.time_ms).collect();
        if eos.len() > 1 {
            return Err(Error::InvalidMetrics(format!(
                "timeline may hold at most one eos_emitted, got {}",
                eos.len()
            )));
        }
        if let Some(&t) = eos.first() {
            if t < ends[0] {
                return Err(Error::InvalidMetrics(format!(
                    "eos_emitted at {t} ms precedes utterance_end at {} ms",
                    ends[0]
                )));
            }
        }
        events.sort_by(|a, b| a.time_ms.total_cmp(&b.time_ms));
        Ok(Self { events })
    }

    pub fn events(&self) -> &[TimelineEvent] {
        &self.events
    }

    pub fn utterance_end_ms(&self) -> f64 {
        self.events
            .iter()
            .find(|e| e.kind == EventKind::UtteranceEnd)
            .map(|e| e.time_ms)
            .expect("validated at construction")
    }

    /// The audio ends when its last block has arrived.
    pub fn audio_ms(&self) -> f64 {
        self.utterance_end_ms()
    }

    pub fn eos_emitted_ms(&self) -> Option<f64> {
        self.events.iter().find(|e| e.kind == EventKind::EosEmitted).map(|e| e.time_ms)
    }

    pub fn committed_steps(&self) -> usize {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::StepCommitted { .. })).count()
    }

    pub fn discarded_steps(&self) -> usize {
        self.events.iter().filter(|e| matches!(e.kind, EventKind::StepDiscarded { .. })).count()
    }

    /// Committed steps that ran after the final block had arrived.
    pub fn last_steps(&self) -> usize {
        let end = self.utterance_end_ms();
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::StepCommitted { .. }) && e.time_ms > end)
            .count()
    }
}

/// Endpoint latency: how long past the end of the audio the decoder took to
/// emit `<eos>`. `None` when the decode never finished.
pub fn ep_latency_ms(timeline: &DecodeTimeline) -> Option<f64> {
    timeline.eos_emitted_ms().map(|t| (t - timeline.utterance_end_ms()).max(0.0))
}

/// Nearest-rank percentile: the value at 1-based index `ceil(p/100 * n)` of
/// the sorted list.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidMetrics("percentile of an empty list".into()));
    }
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::InvalidMetrics(format!("percentile {p} outside (0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // p * n first, division after: computing (p / 100) * n rounds 90/100
    // up into 9.000000000000002 for n = 10 and ceil then overshoots.
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Mean number of committed steps after the final block arrival.
pub fn avg_last_steps(timelines: &[DecodeTimeline]) -> Result<f64> {
    if timelines.is_empty() {
        return Err(Error::InvalidMetrics("no timelines to average".into()));
    }
    let total: usize = timelines.iter().map(|t| t.last_steps()).sum();
    Ok(total as f64 / timelines.len() as f64)
}

/// Real-time factor: decode compute time over audio duration. Compute time
/// is steps times the simulated per-step cost, unless a measured wall-clock
/// total is supplied.
pub fn real_time_factor(
    timelines: &[DecodeTimeline],
    step_cost_ms: f64,
    wall_clock_ms: Option<f64>,
) -> Result<f64> {
    let audio: f64 = timelines.iter().map(|t| t.audio_ms()).sum();
    if audio <= 0.0 {
        return Err(Error::InvalidMetrics("zero audio duration".into()));
    }
    let compute = match wall_clock_ms {
        Some(wall) => wall,
        None => {
            let steps: usize =
                timelines.iter().map(|t| t.committed_steps() + t.discarded_steps()).sum();
            steps as f64 * step_cost_ms
        }
    };
    Ok(compute / audio)
}

/// Per-utterance row of a report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtteranceMetrics {
    pub name: String,
    pub audio_ms: f64,
    pub ep_ms: Option<f64>,
    pub committed_steps: usize,
    pub discarded_steps: usize,
    pub last_steps: usize,
    pub matched: bool,
    pub truncated: bool,
}

impl UtteranceMetrics {
    pub fn from_timeline(
        name: String,
        timeline: &DecodeTimeline,
        matched: bool,
        truncated: bool,
    ) -> Self {
        Self {
            name,
            audio_ms: timeline.audio_ms(),
            ep_ms: ep_latency_ms(timeline),
            committed_steps: timeline.committed_steps(),
            discarded_steps: timeline.discarded_steps(),
            last_steps: timeline.last_steps(),
            matched,
            truncated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryMetrics {
    pub utterance_count: usize,
    pub ep50_ms: Option<f64>,
    pub ep90_ms: Option<f64>,
    pub rtf: f64,
    pub avg_last_steps: f64,
    pub discard_count: usize,
    pub matched_count: usize,
    pub truncated_count: usize,
}

/// Aggregated metrics over a suite, plus the per-utterance rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mode: String,
    pub step_cost_ms: f64,
    pub clock: &'static str,
    pub summary: SummaryMetrics,
    pub utterances: Vec<UtteranceMetrics>,
}

impl MetricsReport {
    /// Rows may arrive in any order; they are sorted by name so concurrent
    /// submission cannot change the report.
    pub fn build(
        mode: &str,
        step_cost_ms: f64,
        mut rows: Vec<UtteranceMetrics>,
        wall_clock_ms: Option<f64>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidMetrics("report needs at least one utterance".into()));
        }
        if !(step_cost_ms.is_finite() && step_cost_ms >= 0.0) {
            return Err(Error::InvalidMetrics(format!(
                "step cost {step_cost_ms} ms must be finite and nonnegative"
            )));
        }
        rows.sort_by(|a, b| a.name.cmp(&b.name));
        let audio: f64 = rows.iter().map(|r| r.audio_ms).sum();
        if audio <= 0.0 {
            return Err(Error::InvalidMetrics("zero audio duration".into()));
        }
        let eps: Vec<f64> = rows.iter().filter_map(|r| r.ep_ms).collect();
        let (ep50_ms, ep90_ms) = if eps.is_empty() {
            (None, None)
        } else {
            (Some(percentile(&eps, 50.0)?), Some(percentile(&eps, 90.0)?))
        };
        let steps: usize = rows.iter().map(|r| r.committed_steps + r.discarded_steps).sum();
        let compute = wall_clock_ms.unwrap_or(steps as f64 * step_cost_ms);
        let last_total: usize = rows.iter().map(|r| r.last_steps).sum();
        let summary = SummaryMetrics {
            utterance_count: rows.len(),
            ep50_ms,
            ep90_ms,
            rtf: compute / audio,
            avg_last_steps: last_total as f64 / rows.len() as f64,
            discard_count: rows.iter().map(|r| r.discarded_steps).sum(),
            matched_count: rows.iter().filter(|r| r.matched).count(),
            truncated_count: rows.iter().filter(|r| r.truncated).count(),
        };
        Ok(Self {
            mode: mode.to_string(),
            step_cost_ms,
            clock: if wall_clock_ms.is_some() { "wall" } else { "simulated" },
            summary,
            utterances: rows,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per utterance plus a trailing summary row; the aggregate
    /// columns are empty on utterance rows and filled on the summary row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let blank = String::new();
        let fmt_opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record([
            "name",
            "audio_ms",
            "ep_ms",
            "ep50_ms",
            "ep90_ms",
            "rtf",
            "committed_steps",
            "discarded_steps",
            "last_steps",
            "avg_last_steps",
            "matched",
            "truncated",
        ])
        .map_err(|e| Error::InvalidMetrics(format!("csv write failed: {e}")))?;
        for r in &self.utterances {
            w.write_record([
                r.name.clone(),
                r.audio_ms.to_string(),
                fmt_opt(r.ep_ms),
                blank.clone(),
                blank.clone(),
                blank.clone(),
                r.committed_steps.to_string(),
                r.discarded_steps.to_string(),
                r.last_steps.to_string(),
                blank.clone(),
                r.matched.to_string(),
                r.truncated.to_string(),
            ])
            .map_err(|e| Error::InvalidMetrics(format!("csv write failed: {e}")))?;
        }
        let s = &self.summary;
        let audio: f64 = self.utterances.iter().map(|r| r.audio_ms).sum();
        let committed: usize = self.utterances.iter().map(|r| r.committed_steps).sum();
        let last: usize = self.utterances.iter().map(|r| r.last_steps).sum();
        w.write_record([
            "summary".to_string(),
            audio.to_string(),
            blank,
            fmt_opt(s.ep50_ms),
            fmt_opt(s.ep90_ms),
            s.rtf.to_string(),
            committed.to_string(),
            s.discard_count.to_string(),
            last.to_string(),
            s.avg_last_steps.to_string(),
            s.matched_count.to_string(),
            s.truncated_count.to_string(),
        ])
        .map_err(|e| Error::InvalidMetrics(format!("csv write failed: {e}")))?;
        let bytes =
            w.into_inner().map_err(|e| Error::InvalidMetrics(format!("csv flush failed: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::InvalidMetrics(format!("csv not utf-8: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(time_ms: f64, kind: EventKind) -> TimelineEvent {
        TimelineEvent { time_ms, kind }
    }

    /// End at `end_ms`, then `steps` committed steps of `cost` ms each, the
    /// last one emitting eos.
    fn tail_timeline(end_ms: f64, steps: usize, cost: f64) -> DecodeTimeline {
        let mut events = vec![
            ev(end_ms, EventKind::BlockArrival { block: 1 }),
            ev(end_ms, EventKind::UtteranceEnd),
        ];
        for k in 1..=steps {
            events
                .push(ev(end_ms + k as f64 * cost, EventKind::StepCommitted { step: k, block: 1 }));
        }
        events.push(ev(end_ms + steps as f64 * cost, EventKind::EosEmitted));
        DecodeTimeline::new(events).unwrap()
    }

    #[test]
    fn ep_latency_subtracts_utterance_end() {
        let tl = DecodeTimeline::new(vec![
            ev(3000.0, EventKind::UtteranceEnd),
            ev(3250.0, EventKind::EosEmitted),
        ])
        .unwrap();
        assert_eq!(ep_latency_ms(&tl), Some(250.0));
    }

    #[test]
    fn ep_latency_is_zero_when_eos_lands_on_the_end() {
        let tl = DecodeTimeline::new(vec![
            ev(3000.0, EventKind::UtteranceEnd),
            ev(3000.0, EventKind::EosEmitted),
        ])
        .unwrap();
        assert_eq!(ep_latency_ms(&tl), Some(0.0));
    }

    #[test]
    fn ep_latency_is_none_without_eos() {
        let tl = DecodeTimeline::new(vec![ev(3000.0, EventKind::UtteranceEnd)]).unwrap();
        assert_eq!(ep_latency_ms(&tl), None);
    }

    #[test]
    fn ten_utterances_with_five_tail_steps_pin_ep90_at_50ms() {
        let timelines: Vec<DecodeTimeline> =
            (0..10).map(|i| tail_timeline(1000.0 + i as f64, 5, 10.0)).collect();
        let eps: Vec<f64> = timelines.iter().map(|t| ep_latency_ms(t).unwrap()).collect();
        assert!(eps.iter().all(|&e| e == 50.0));
        assert_eq!(percentile(&eps, 90.0).unwrap(), 50.0);
        assert_eq!(avg_last_steps(&timelines).unwrap(), 5.0);
    }

    #[test]
    fn percentile_matches_nearest_rank_examples() {
        assert_eq!(percentile(&[100.0], 90.0).unwrap(), 100.0);
        let v: Vec<f64> = (1..=10).map(|i| (i * 10) as f64).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&v, 90.0).unwrap(), 90.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&v, 1.0).unwrap(), 10.0);
    }

    #[test]
    fn percentile_sorts_its_input() {
        assert_eq!(percentile(&[30.0, 10.0, 20.0], 50.0).unwrap(), 20.0);
    }

    #[test]
    fn percentile_rank_does_not_drift_above_the_rounding_edge() {
        // 0.9 * 10 in floating point lands just above 9; computing the
        // product before dividing keeps the rank at exactly 9.
        let v: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(percentile(&v, 90.0).unwrap(), 9.0);
    }

    #[test]
    fn percentile_rejects_degenerate_input() {
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&[1.0], 0.0).is_err());
        assert!(percentile(&[1.0], 101.0).is_err());
    }

    #[test]
    fn percentiles_are_monotone_in_p() {
        let v = [5.0, 80.0, 3.0, 42.0, 17.0, 99.0, 23.0];
        let mut prev = f64::NEG_INFINITY;
        for p in 1..=100 {
            let x = percentile(&v, p as f64).unwrap();
            assert!(x >= prev, "p={p}: {x} < {prev}");
            prev = x;
        }
    }

    #[test]
    fn avg_last_steps_averages_tail_counts() {
        let a = tail_timeline(500.0, 3, 10.0);
        assert_eq!(avg_last_steps(std::slice::from_ref(&a)).unwrap(), 3.0);
        let b = tail_timeline(500.0, 2, 10.0);
        let c = tail_timeline(500.0, 4, 10.0);
        assert_eq!(avg_last_steps(&[b, c]).unwrap(), 3.0);
        assert_eq!(a.last_steps(), 3);
    }

    #[test]
    fn last_steps_ignores_pre_end_commits() {
        let tl = DecodeTimeline::new(vec![
            ev(100.0, EventKind::StepCommitted { step: 1, block: 1 }),
            ev(500.0, EventKind::UtteranceEnd),
            ev(510.0, EventKind::StepCommitted { step: 2, block: 2 }),
        ])
        .unwrap();
        assert_eq!(tl.committed_steps(), 2);
        assert_eq!(tl.last_steps(), 1);
    }

    #[test]
    fn rtf_is_compute_over_audio() {
        // 100 steps at 10 ms over 10 s of audio.
        let mut events = vec![ev(10_000.0, EventKind::UtteranceEnd)];
        for k in 1..=100 {
            events.push(ev(
                10_000.0 + k as f64 * 10.0,
                EventKind::StepCommitted { step: k, block: 1 },
            ));
        }
        let tl = DecodeTimeline::new(events).unwrap();
        let one = std::slice::from_ref(&tl);
        assert!((real_time_factor(one, 10.0, None).unwrap() - 0.1).abs() < 1e-12);
        assert!((real_time_factor(one, 20.0, None).unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(real_time_factor(one, 10.0, Some(2000.0)).unwrap(), 0.2);
    }

    #[test]
    fn rtf_counts_discarded_steps_and_handles_zero_steps() {
        let tl = DecodeTimeline::new(vec![
            ev(1000.0, EventKind::UtteranceEnd),
            ev(1010.0, EventKind::StepDiscarded { step: 1, block: 1 }),
        ])
        .unwrap();
        assert!((real_time_factor(&[tl], 10.0, None).unwrap() - 0.01).abs() < 1e-12);
        let idle = DecodeTimeline::new(vec![ev(1000.0, EventKind::UtteranceEnd)]).unwrap();
        assert_eq!(real_time_factor(&[idle], 10.0, None).unwrap(), 0.0);
    }

    #[test]
    fn rtf_rejects_zero_audio() {
        let tl = DecodeTimeline::new(vec![ev(0.0, EventKind::UtteranceEnd)]).unwrap();
        assert!(real_time_factor(&[tl], 10.0, None).is_err());
    }

    #[test]
    fn timeline_validation_enforces_the_invariants() {
        assert!(DecodeTimeline::new(vec![]).is_err(), "missing utterance_end");
        assert!(
            DecodeTimeline::new(vec![
                ev(1.0, EventKind::UtteranceEnd),
                ev(2.0, EventKind::UtteranceEnd),
            ])
            .is_err(),
            "double utterance_end"
        );
        assert!(
            DecodeTimeline::new(vec![
                ev(10.0, EventKind::UtteranceEnd),
                ev(5.0, EventKind::EosEmitted),
            ])
            .is_err(),
            "eos before the utterance end"
        );
        assert!(
            DecodeTimeline::new(vec![ev(f64::NAN, EventKind::UtteranceEnd)]).is_err(),
            "non-finite time"
        );
    }

    #[test]
    fn timeline_sorts_events_by_time() {
        let tl = DecodeTimeline::new(vec![
            ev(500.0, EventKind::UtteranceEnd),
            ev(100.0, EventKind::BlockArrival { block: 1 }),
            ev(510.0, EventKind::StepCommitted { step: 1, block: 2 }),
            ev(300.0, EventKind::BlockArrival { block: 2 }),
        ])
        .unwrap();
        let times: Vec<f64> = tl.events().iter().map(|e| e.time_ms).collect();
        assert_eq!(times, vec![100.0, 300.0, 500.0, 510.0]);
    }

    fn sample_rows() -> Vec<UtteranceMetrics> {
        vec![
            UtteranceMetrics {
                name: "utt-b".into(),
                audio_ms: 2000.0,
                ep_ms: Some(30.0),
                committed_steps: 6,
                discarded_steps: 1,
                last_steps: 3,
                matched: true,
                truncated: false,
            },
            UtteranceMetrics {
                name: "utt-a".into(),
                audio_ms: 1000.0,
                ep_ms: Some(20.0),
                committed_steps: 4,
                discarded_steps: 0,
                last_steps: 2,
                matched: false,
                truncated: false,
            },
        ]
    }

    #[test]
    fn report_sorts_rows_and_aggregates() {
        let report = MetricsReport::build("rabs", 10.0, sample_rows(), None).unwrap();
        assert_eq!(report.utterances[0].name, "utt-a");
        assert_eq!(report.summary.utterance_count, 2);
        assert_eq!(report.summary.ep50_ms, Some(20.0));
        assert_eq!(report.summary.ep90_ms, Some(30.0));
        assert_eq!(report.summary.discard_count, 1);
        assert_eq!(report.summary.matched_count, 1);
        assert_eq!(report.summary.truncated_count, 0);
        assert!((report.summary.avg_last_steps - 2.5).abs() < 1e-12);
        // 11 steps at 10 ms over 3 s of audio.
        assert!((report.summary.rtf - 110.0 / 3000.0).abs() < 1e-12);
        assert_eq!(report.clock, "simulated");
        assert!(report.summary.ep50_ms.unwrap() <= report.summary.ep90_ms.unwrap());
    }

    #[test]
    fn report_submission_order_does_not_matter() {
        let a = MetricsReport::build("rabs", 10.0, sample_rows(), None).unwrap();
        let mut reversed = sample_rows();
        reversed.reverse();
        let b = MetricsReport::build("rabs", 10.0, reversed, None).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn report_with_only_truncated_rows_has_no_percentiles() {
        let rows = vec![UtteranceMetrics {
            name: "utt".into(),
            audio_ms: 1000.0,
            ep_ms: None,
            committed_steps: 9,
            discarded_steps: 0,
            last_steps: 9,
            matched: false,
            truncated: true,
        }];
        let report = MetricsReport::build("rabs", 10.0, rows, None).unwrap();
        assert_eq!(report.summary.ep50_ms, None);
        assert_eq!(report.summary.ep90_ms, None);
        assert_eq!(report.summary.truncated_count, 1);
    }

    #[test]
    fn csv_has_one_row_per_utterance_plus_summary() {
        let report = MetricsReport::build("rabs", 10.0, sample_rows(), None).unwrap();
        let csv = report.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4, "header, two utterances, summary");
        assert!(lines[0].starts_with("name,audio_ms,ep_ms,ep50_ms,ep90_ms,rtf"));
        assert!(lines[1].starts_with("utt-a,"));
        assert!(lines[3].starts_with("summary,3000,"));
        assert!(lines[3].contains(",20,30,"), "summary row carries ep50 and ep90");
    }

    #[test]
    fn json_serialization_is_byte_stable() {
        let a = MetricsReport::build("rabs", 10.0, sample_rows(), None).unwrap().to_json();
        let b = MetricsReport::build("rabs", 10.0, sample_rows(), None).unwrap().to_json();
        assert_eq!(a, b);
        assert!(a.ends_with('\n'));
    }
}
