//! Executes train and score jobs: load windows over the bus, clean the
//! target, build features, fit or score, and store the results.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use castorette_analytics::gam2::{fit_gam2, score, Gam2Artifact};
use castorette_analytics::transform::{
    engineer_features, fit_transfer, iterative_segment_removal, pelt, remove_outliers, FeatureSpec, MaskedSeries,
    RawCovariates,
};
use chrono::NaiveDate;
use log::{info, warn};

use crate::api::{
    ApiError, ForecastMeta, IngestRequest, IngestResponse, JobRecord, ModelGet, ModelResponse, PutVersion,
    SeriesBatch, SeriesQuery, SeriesResponse, VersionResponse, VersionsQuery, VersionsResponse,
};
use crate::bus::{queues, Bus};
use crate::context::ContextRef;
use crate::models::{Model, ModelId};
use crate::pipeline::{PipelineSpec, TaskKind, TransformStep};
use crate::scheduler::{Clock, JobExecutor, JobResult, JobStatus, Subject, Task};
use crate::time::{self, Timestamp, DAY, HOUR};
use crate::timeseries::{LayerKind, Producer, SeriesPoint, VersionId};

/// `[due - train_window, due)` for training, `[due, due + score_horizon)`
/// for scoring.
pub fn window_for(task: TaskKind, due: Timestamp, pipeline: &PipelineSpec) -> (Timestamp, Timestamp) {
    match task {
        TaskKind::Train => (due - pipeline.load.train_window.seconds(), due),
        TaskKind::Score => (due, due + pipeline.load.score_horizon.seconds()),
    }
}

fn floor_to(t: Timestamp, step: i64) -> Timestamp {
    t.div_euclid(step) * step
}

fn ceil_to(t: Timestamp, step: i64) -> Timestamp {
    -floor_to(-t, step)
}

/// Hourly grid and raw series for one job.
struct Loaded {
    raw: RawCovariates,
    window: (Timestamp, Timestamp),
    target_present: usize,
}

pub struct Runner {
    bus: Bus,
    clock: Arc<Clock>,
    holidays: Vec<NaiveDate>,
}

fn api<T>(r: Result<T, crate::bus::BusError>) -> Result<T, String> {
    r.map_err(|e| ApiError::from_bus(e).to_string())
}

impl Runner {
    pub fn new(bus: Bus, clock: Arc<Clock>, holidays: Vec<NaiveDate>) -> Self {
        Self { bus, clock, holidays }
    }

    /// Runs `task`, publishes `job.completed` or `job.failed` and returns
    /// the record.
    pub fn run(&self, task: &Task) -> JobRecord {
        let start = Instant::now();
        let outcome = match task.subject {
            Subject::Model(id) => self.train(id, task.due),
            Subject::Version(id) => self.score(id, task.due),
        };
        let duration = start.elapsed().as_secs_f64();
        let result = match outcome {
            Ok(id) => JobResult::ok(id, duration),
            Err(e) => {
                warn!("{} job for {} due {} failed: {e}", kind_name(task.task), task.subject, time::format_timestamp(task.due));
                JobResult::failed(e, duration)
            }
        };
        let record = JobRecord {
            job: *task,
            result,
            finished_at: self.clock.now(),
        };
        let topic = match record.result.status {
            JobStatus::Ok => queues::JOB_COMPLETED,
            JobStatus::Failed => queues::JOB_FAILED,
        };
        self.bus.publish(topic, serde_json::to_value(&record).expect("record serializes"));
        record
    }

    fn feature_spec(&self, pipeline: &PipelineSpec) -> FeatureSpec {
        let mut spec = pipeline.feature_spec();
        if spec.holidays.is_empty() {
            spec.holidays = self.holidays.clone();
        }
        spec
    }

    fn query(&self, context: &ContextRef, from: Timestamp, to: Timestamp) -> Result<Vec<SeriesPoint>, String> {
        let resp: SeriesResponse = api(self.bus.call(
            queues::TS_QUERY,
            &SeriesQuery {
                context: context.clone(),
                from,
                to,
                kind: LayerKind::Observed,
                producer: Producer::Latest,
            },
        ))?;
        Ok(resp.points)
    }

    /// Loads the target (up to `target_to`) and covariates on an hourly grid
    /// that covers the window, the largest lag before it and whole UTC days.
    fn load(
        &self,
        model: &Model,
        spec: &FeatureSpec,
        window: (Timestamp, Timestamp),
        target_to: Timestamp,
    ) -> Result<Loaded, String> {
        let pipeline = &model.pipeline;
        let history = i64::from(spec.max_lag_hours()) * HOUR;
        let grid_from = floor_to(window.0 - history, DAY);
        let grid_to = ceil_to(window.1, DAY).max(grid_from + HOUR);
        let timestamps: Vec<Timestamp> = (grid_from..grid_to).step_by(HOUR as usize).collect();
        let align = |points: Vec<SeriesPoint>| -> MaskedSeries {
            let mut values = vec![f64::NAN; timestamps.len()];
            for p in points {
                if p.ts >= grid_from && p.ts < grid_to && (p.ts - grid_from) % HOUR == 0 {
                    values[((p.ts - grid_from) / HOUR) as usize] = p.value;
                }
            }
            MaskedSeries::new(values)
        };

        let target_ref = pipeline.target(&model.target);
        let target = align(self.query(target_ref, grid_from, target_to.max(grid_from + 1))?);
        let target_present = (0..timestamps.len())
            .filter(|&i| target.is_present(i) && timestamps[i] >= window.0 && timestamps[i] < window.1)
            .count();

        let mut covariates = BTreeMap::new();
        for c in &pipeline.load.covariates {
            covariates.insert(c.feature_name().to_string(), align(self.query(&c.context, grid_from, grid_to)?));
        }
        Ok(Loaded {
            raw: RawCovariates {
                timestamps,
                covariates,
                target: Some(target),
            },
            window,
            target_present,
        })
    }

    fn clean(&self, pipeline: &PipelineSpec, mut target: MaskedSeries) -> Result<MaskedSeries, String> {
        for step in &pipeline.transform {
            target = match step {
                TransformStep::Outliers(cfg) => remove_outliers(&target, cfg).0,
                TransformStep::Pelt(cfg) => {
                    iterative_segment_removal(&target, cfg).map_err(|e| format!("pelt step: {e}"))?.0
                }
                TransformStep::Transfer(cfg) => {
                    let present = target.present_indices();
                    if present.len() < 2 {
                        continue;
                    }
                    let values: Vec<f64> = present.iter().map(|&i| target.values[i]).collect();
                    let seg = pelt(&values, cfg.pelt_penalty.resolve(values.len()), cfg.cost)
                        .map_err(|e| format!("transfer step: {e}"))?;
                    match seg.changepoints.last() {
                        Some(&cp) => match fit_transfer(&target, present[cp]) {
                            Ok(f) => f.realign(&target),
                            Err(e) => {
                                warn!("transfer step skipped: {e}");
                                target
                            }
                        },
                        None => target,
                    }
                }
                TransformStep::Features { .. } => target,
            };
        }
        Ok(target)
    }

    fn model(&self, req: ModelGet) -> Result<ModelResponse, String> {
        api(self.bus.call(queues::MODEL_GET, &req))
    }

    fn train(&self, model_id: ModelId, due: Timestamp) -> Result<u64, String> {
        let versions: VersionsResponse = api(self.bus.call(queues::MODEL_VERSIONS, &VersionsQuery { model: model_id }))?;
        if let Some(v) = versions.versions.iter().find(|v| v.due == Some(due)) {
            info!("model {model_id} already trained for {}; version {}", time::format_timestamp(due), v.id);
            return Ok(v.id);
        }
        let model = self.model(ModelGet {
            model: Some(model_id),
            version: None,
        })?
        .model;
        let pipeline = &model.pipeline;
        let spec = self.feature_spec(pipeline);
        let window = window_for(TaskKind::Train, due, pipeline);
        let mut loaded = self.load(&model, &spec, window, window.1)?;
        if loaded.target_present == 0 {
            return Err(format!(
                "no observations of {}/{} in training window [{}, {})",
                model.target.entity,
                model.target.signal,
                time::format_timestamp(window.0),
                time::format_timestamp(window.1)
            ));
        }
        let target = loaded.raw.target.take().expect("target loaded");
        loaded.raw.target = Some(self.clean(pipeline, target)?);
        let frame = engineer_features(&loaded.raw, &spec).map_err(|e| e.to_string())?;

        let names: Vec<&str> = spec.features.iter().map(String::as_str).collect();
        let complete = frame.complete_rows(&names, true);
        let keep: Vec<bool> = frame
            .timestamps()
            .iter()
            .zip(&complete)
            .map(|(ts, ok)| *ok && *ts >= loaded.window.0 && *ts < loaded.window.1)
            .collect();
        let frame = frame.filter_rows(&keep);
        if frame.is_empty() {
            return Err(format!(
                "no complete training rows in [{}, {})",
                time::format_timestamp(window.0),
                time::format_timestamp(window.1)
            ));
        }
        let artifact = fit_gam2(&frame, &pipeline.train).map_err(|e| format!("training failed: {e}"))?;
        let metrics = BTreeMap::from([
            ("rmse".to_string(), artifact.train_metrics.rmse),
            ("mae".to_string(), artifact.train_metrics.mae),
            ("n".to_string(), artifact.train_metrics.n as f64),
        ]);
        let template = pipeline.score.schedule;
        let stored: VersionResponse = api(self.bus.call(
            queues::MODEL_PUT_VERSION,
            &PutVersion {
                model: model_id,
                params: artifact.to_json(),
                trained_at: self.clock.now(),
                due: Some(due),
                score_schedule: template.map(|t| t.instantiate(due)),
                metrics,
                supersede: template.is_some(),
            },
        ))?;
        Ok(stored.version.id)
    }

    fn score(&self, version_id: VersionId, due: Timestamp) -> Result<u64, String> {
        let resp = self.model(ModelGet {
            model: None,
            version: Some(version_id),
        })?;
        let version = resp.version.ok_or_else(|| format!("unknown model version {version_id}"))?;
        let model = resp.model;
        let artifact = Gam2Artifact::from_json(&version.params).map_err(|e| format!("corrupt params: {e}"))?;
        let pipeline = &model.pipeline;
        let spec = self.feature_spec(pipeline);
        let window = window_for(TaskKind::Score, due, pipeline);
        let loaded = self.load(&model, &spec, window, window.0)?;
        let frame = engineer_features(&loaded.raw, &spec).map_err(|e| e.to_string())?;
        let keep: Vec<bool> = frame.timestamps().iter().map(|ts| *ts >= window.0 && *ts < window.1).collect();
        let frame = frame.filter_rows(&keep);
        if frame.is_empty() {
            return Err(format!(
                "scoring window [{}, {}) holds no hourly timestamp",
                time::format_timestamp(window.0),
                time::format_timestamp(window.1)
            ));
        }
        let out = score(&artifact, &frame, pipeline.load.score_horizon.seconds())
            .map_err(|e| format!("scoring failed: {e}"))?;

        let target = pipeline.target(&model.target);
        let output = ContextRef {
            signal: pipeline.score.output_signal.clone().unwrap_or_else(|| target.signal.clone()),
            signal_type: pipeline.score.output_signal.as_ref().map_or(target.signal_type.clone(), |_| None),
            ..target.clone()
        };
        let points = |values: &[f64]| -> Vec<SeriesPoint> {
            out.timestamps.iter().zip(values).map(|(ts, v)| SeriesPoint::new(*ts, *v)).collect()
        };
        let stored: IngestResponse = api(self.bus.call(
            queues::TS_INGEST,
            &IngestRequest {
                series: vec![
                    SeriesBatch {
                        context: output.clone(),
                        points: points(&out.mu),
                    },
                    SeriesBatch {
                        context: ContextRef {
                            signal_type: None,
                            ..output.sigma()
                        },
                        points: points(&out.sigma),
                    },
                ],
                forecast: Some(ForecastMeta {
                    producer: version_id,
                    due,
                    created_at: Some(self.clock.now()),
                }),
            },
        ))?;
        stored.layers.first().copied().ok_or_else(|| "forecast ingest stored no layer".to_string())
    }
}

fn kind_name(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Train => "train",
        TaskKind::Score => "score",
    }
}

impl JobExecutor for Runner {
    fn execute(&self, task: &Task) -> JobResult {
        self.run(task).result
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::time::IsoDuration;

    #[test]
    fn windows() {
        let mut p: PipelineSpec = serde_json::from_value(serde_json::json!({
            "load": {"train_window": "P30D", "covariates": []}
        }))
        .unwrap();
        let d = 1_531_386_000;
        assert_eq!(window_for(TaskKind::Train, d, &p), (d - 30 * DAY, d));
        assert_eq!(window_for(TaskKind::Score, d, &p), (d, d + DAY));
        p.load.score_horizon = IsoDuration::hours(6);
        assert_eq!(window_for(TaskKind::Score, d, &p), (d, d + 6 * HOUR));
    }

    #[test]
    fn rounding() {
        assert_eq!(floor_to(-1, DAY), -DAY);
        assert_eq!(ceil_to(1, DAY), DAY);
        assert_eq!(ceil_to(DAY, DAY), DAY);
        assert_eq!(floor_to(DAY + 5, HOUR), DAY);
    }
}
