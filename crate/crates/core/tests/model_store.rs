mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use castorette_core::context::{ContextRef, ContextStore, RelationKind};
use castorette_core::models::{ModelError, ModelInput, ModelStore, NewVersion};
use castorette_core::pipeline::{DeploymentConfig, TaskKind};
use castorette_core::time::{parse_timestamp, IsoDuration, Timestamp};
use common::{small_params, small_pipeline, DAY};
use serde_json::json;

fn context() -> Arc<ContextStore> {
    let c = ContextStore::in_memory();
    c.upsert_entity_type("substation").unwrap();
    c.upsert_signal_type("load").unwrap();
    c.upsert_signal_type("weather").unwrap();
    for e in ["A", "B", "C"] {
        c.upsert_entity(e, "substation", None).unwrap();
    }
    c.upsert_signal("energy", "load", "kW").unwrap();
    c.upsert_signal("reactive", "load", "kvar").unwrap();
    c.upsert_signal("Temperature", "weather", "degC").unwrap();
    Arc::new(c)
}

fn input(name: &str, entity: &str, signal: &str) -> ModelInput {
    serde_json::from_value(json!({
        "name": name,
        "target": {"entity": entity, "signal": signal},
        "pipeline": small_pipeline(entity)
    }))
    .unwrap()
}

fn t0() -> Timestamp {
    parse_timestamp("2018-07-12T00:00:00Z").unwrap()
}

fn version(params: &str, due: Timestamp, trained_at: Timestamp) -> NewVersion {
    NewVersion {
        params: params.to_string(),
        trained_at,
        due: Some(due),
        ..NewVersion::default()
    }
}

fn daily_score(from: Timestamp) -> DeploymentConfig {
    DeploymentConfig {
        task: TaskKind::Score,
        time: from,
        repeat: IsoDuration::days(1),
        until: None,
    }
}

#[test]
fn validation_reports_every_problem() {
    let store = ModelStore::in_memory(context());
    let mut bad = input(" ", "Nowhere", "energy");
    bad.pipeline.load.train_window = IsoDuration(0);
    let Err(ModelError::Validation(d)) = store.store_model(bad) else {
        panic!("expected a validation error");
    };
    let steps: Vec<&str> = d.iter().map(|d| d.step.as_str()).collect();
    for want in ["name", "target", "load.target", "load.covariates[0]", "load.train_window"] {
        assert!(steps.contains(&want), "{want} missing from {steps:?}");
    }
    assert!(store.models().is_empty());
}

#[test]
fn versions_dedupe_and_latest_flips() {
    let ctx = context();
    let store = ModelStore::in_memory(ctx.clone());
    let m = store.store_model(input("m", "A", "energy")).unwrap();
    assert!(ctx.resolve(&ContextRef::new("A", "energy#sigma")).is_ok());
    let params = small_params();

    let v1 = store.store_version(m.id, version(&params, t0(), t0() + 60)).unwrap();
    assert_eq!(store.latest_version(m.id).unwrap().id, v1.id);
    let again = store.store_version(m.id, version(&params, t0(), t0() + 999)).unwrap();
    assert_eq!(again, v1);

    // An older clock reading never moves training time backwards.
    let v2 = store.store_version(m.id, version(&params, t0() + DAY, t0())).unwrap();
    assert_eq!(store.latest_version(m.id).unwrap().id, v2.id);
    assert_eq!(v2.trained_at, v1.trained_at);
    assert_eq!(store.versions(m.id).unwrap().len(), 2);
    assert_eq!(store.version(v2.id).unwrap().params, params);

    let err = store.store_version(m.id, version("{\"format_version\": 1}", t0() + 2 * DAY, t0()));
    assert!(matches!(err, Err(ModelError::CorruptParams(_))));
    assert!(matches!(
        store.store_version(99, version(&params, t0(), t0())),
        Err(ModelError::UnknownModel(99))
    ));
}

#[test]
fn newer_template_schedule_cuts_older_one() {
    let store = ModelStore::in_memory(context());
    let m = store.store_model(input("m", "A", "energy")).unwrap();
    let params = small_params();
    let mut n1 = version(&params, t0(), t0());
    n1.score_schedule = Some(daily_score(t0()));
    n1.supersede = true;
    let v1 = store.store_version(m.id, n1).unwrap();
    let mut n2 = version(&params, t0() + 3 * DAY, t0() + 3 * DAY);
    n2.score_schedule = Some(daily_score(t0() + 3 * DAY));
    n2.supersede = true;
    store.store_version(m.id, n2).unwrap();

    let cut = store.version(v1.id).unwrap().score_schedule.unwrap();
    assert_eq!(cut.until, Some(t0() + 3 * DAY - 1));
    assert_eq!(cut.last_at_or_before(t0() + 10 * DAY), Some(t0() + 2 * DAY));
}

#[test]
fn active_version_controls_eligibility() {
    let store = ModelStore::in_memory(context());
    let m = store.store_model(input("m", "A", "energy")).unwrap();
    let other = store.store_model(input("o", "B", "energy")).unwrap();
    let params = small_params();
    let v1 = store.store_version(m.id, version(&params, t0(), t0())).unwrap();
    let v2 = store.store_version(m.id, version(&params, t0() + DAY, t0() + DAY)).unwrap();
    let w = store.store_version(other.id, version(&params, t0(), t0())).unwrap();
    assert!(store.is_eligible(v1.id) && store.is_eligible(v2.id));

    store.set_active_version(m.id, Some(v1.id)).unwrap();
    assert!(store.is_eligible(v1.id) && !store.is_eligible(v2.id));
    assert!(store.is_eligible(w.id));
    let s = store.summary(m.id).unwrap();
    assert_eq!((s.active_version, s.latest_version), (Some(v1.id), Some(v2.id)));
    assert!(matches!(
        store.set_active_version(m.id, Some(w.id)),
        Err(ModelError::VersionMismatch { .. })
    ));

    store.set_active_version(m.id, None).unwrap();
    assert!(store.is_eligible(v2.id));
}

#[test]
fn listing_with_related_entities() {
    let ctx = context();
    let (a, b) = (ctx.entity_by_name("A", None).unwrap().id, ctx.entity_by_name("B", None).unwrap().id);
    ctx.add_relation(RelationKind::ConnectedTo, a, b).unwrap();
    let store = ModelStore::in_memory(ctx.clone());
    let ma = store.store_model(input("a", "A", "energy")).unwrap();
    let mb = store.store_model(input("b", "B", "energy")).unwrap();
    let mc = store.store_model(input("c", "C", "energy")).unwrap();
    let mb2 = store.store_model(input("b2", "B", "reactive")).unwrap();
    let energy = ctx.signal_by_name("energy", None).unwrap().id;

    let ids = |v: Vec<castorette_core::models::ModelSummary>| v.into_iter().map(|m| m.id).collect::<Vec<_>>();
    assert_eq!(ids(store.list_models_for_context(Some(a), Some(energy), false)), vec![ma.id]);
    // Same signal type on a connected entity.
    assert_eq!(
        ids(store.list_models_for_context(Some(a), Some(energy), true)),
        vec![ma.id, mb.id, mb2.id]
    );
    assert_eq!(ids(store.list_models_for_context(None, None, false)).len(), 4);
    assert!(!ids(store.list_models_for_context(Some(a), None, true)).contains(&mc.id));
}

#[test]
fn hierarchy_lists_every_version() {
    let store = ModelStore::in_memory(context());
    let params = small_params();
    for name in ["second", "first"] {
        let m = store.store_model(input(name, "A", "energy")).unwrap();
        for d in 0..2 {
            store.store_version(m.id, version(&params, t0() + d * DAY, t0() + d * DAY)).unwrap();
        }
    }
    let tree = store.model_hierarchy(None);
    assert_eq!(tree.iter().map(|n| n.model.name.as_str()).collect::<Vec<_>>(), ["first", "second"]);
    assert_eq!(tree.iter().map(|n| n.versions.len()).sum::<usize>(), 4);
    for n in &tree {
        assert!(n.versions[0].trained_at <= n.versions[1].trained_at);
    }
}

#[test]
fn reopen_restores_models_versions_and_pins() {
    let dir = tempfile::tempdir().unwrap();
    let open = || {
        let ctx = Arc::new(ContextStore::open(dir.path(), true).unwrap());
        (ctx.clone(), ModelStore::open(dir.path(), ctx, true).unwrap())
    };
    let params = small_params();
    let (ctx, store) = open();
    ctx.upsert_entity_type("substation").unwrap();
    ctx.upsert_signal_type("load").unwrap();
    ctx.upsert_signal_type("weather").unwrap();
    ctx.upsert_entity("A", "substation", None).unwrap();
    ctx.upsert_signal("energy", "load", "kW").unwrap();
    ctx.upsert_signal("Temperature", "weather", "degC").unwrap();
    let m = store.store_model(input("m", "A", "energy")).unwrap();
    let mut n = version(&params, t0(), t0());
    n.metrics = BTreeMap::from([("rmse".to_string(), 0.1 + 0.2)]);
    n.score_schedule = Some(daily_score(t0()));
    let v = store.store_version(m.id, n).unwrap();
    store.set_active_version(m.id, Some(v.id)).unwrap();
    let before = (store.models(), store.all_versions(), store.active_version(m.id));
    drop((ctx, store));

    let (_ctx, store) = open();
    assert_eq!((store.models(), store.all_versions(), store.active_version(m.id)), before);
    let m2 = store.store_model(input("m2", "A", "energy")).unwrap();
    assert!(m2.id > m.id);
}
