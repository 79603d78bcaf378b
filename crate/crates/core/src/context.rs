//! Semantic context graph: entity and signal types, entities, signals,
//! relations between entities, and the (entity, signal) keys that bind
//! time series and models.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::journal::{Journal, JournalError};

pub type EntityId = u64;
pub type SignalId = u64;

/// Suffix of the derived signal holding forecast standard deviations.
pub const SIGMA_SUFFIX: &str = "#sigma";

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("unknown entity type `{0}`")]
    UnknownEntityType(String),
    #[error("unknown signal type `{0}`")]
    UnknownSignalType(String),
    #[error("{kind} `{name}` not found")]
    NotFound { kind: &'static str, name: String },
    #[error("{kind} name `{name}` is ambiguous across types: {types:?}")]
    Ambiguous {
        kind: &'static str,
        name: String,
        types: Vec<String>,
    },
    #[error("PARENT_OF {from} -> {to} would create a cycle")]
    CycleError { from: String, to: String },
    #[error("entity `{0}` already has a parent")]
    MultipleParents(String),
    #[error("relation from `{0}` to itself")]
    SelfEdge(String),
    #[error("invalid geography: lat {lat}, lon {lon}")]
    InvalidGeo { lat: f64, lon: f64 },
    #[error("invalid name `{0}`")]
    InvalidName(String),
    #[error(transparent)]
    Storage(#[from] JournalError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityType {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalType {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geo {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    pub name: String,
    pub type_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<Geo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub id: SignalId,
    pub name: String,
    pub type_id: u64,
    pub unit: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelationKind {
    ParentOf,
    ConnectedTo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub from: EntityId,
    pub to: EntityId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub entity: EntityId,
    pub signal: SignalId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLink {
    pub model: u64,
    pub name: String,
    pub target: ContextKey,
}

/// A context named the way users refer to it. The type names disambiguate
/// entities or signals that share a name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextRef {
    pub entity: String,
    pub signal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entity_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_type: Option<String>,
}

impl ContextRef {
    pub fn new(entity: impl Into<String>, signal: impl Into<String>) -> Self {
        Self {
            entity: entity.into(),
            signal: signal.into(),
            entity_type: None,
            signal_type: None,
        }
    }

    pub fn sigma(&self) -> Self {
        Self {
            signal: format!("{}{SIGMA_SUFFIX}", self.signal),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Entity,
    Signal,
    Series,
    Model,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geo: Option<Geo>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub from: String,
    pub to: String,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GraphDocument {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    EntityType(EntityType),
    SignalType(SignalType),
    Entity(Entity),
    Signal(Signal),
    Relation(Relation),
    Bind(ContextKey),
    ModelLink(ModelLink),
}

#[derive(Default)]
struct State {
    next_id: u64,
    entity_types: BTreeMap<u64, EntityType>,
    signal_types: BTreeMap<u64, SignalType>,
    entities: BTreeMap<EntityId, Entity>,
    signals: BTreeMap<SignalId, Signal>,
    relations: BTreeSet<Relation>,
    bound: BTreeSet<ContextKey>,
    models: BTreeMap<u64, ModelLink>,
}

impl State {
    fn apply(&mut self, record: Record) {
        let id = match &record {
            Record::EntityType(t) => t.id,
            Record::SignalType(t) => t.id,
            Record::Entity(e) => e.id,
            Record::Signal(s) => s.id,
            _ => 0,
        };
        self.next_id = self.next_id.max(id + 1);
        match record {
            Record::EntityType(t) => {
                self.entity_types.insert(t.id, t);
            }
            Record::SignalType(t) => {
                self.signal_types.insert(t.id, t);
            }
            Record::Entity(e) => {
                self.entities.insert(e.id, e);
            }
            Record::Signal(s) => {
                self.signals.insert(s.id, s);
            }
            Record::Relation(r) => {
                self.relations.insert(r);
            }
            Record::Bind(k) => {
                self.bound.insert(k);
            }
            Record::ModelLink(l) => {
                self.models.insert(l.model, l);
            }
        }
    }

    fn fresh_id(&mut self) -> u64 {
        self.next_id = self.next_id.max(1);
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    fn entity_type_named(&self, name: &str) -> Option<&EntityType> {
        self.entity_types.values().find(|t| t.name == name)
    }

    fn signal_type_named(&self, name: &str) -> Option<&SignalType> {
        self.signal_types.values().find(|t| t.name == name)
    }

    fn find_entity(&self, name: &str, type_name: Option<&str>) -> Result<&Entity, ContextError> {
        let matches: Vec<&Entity> = self
            .entities
            .values()
            .filter(|e| e.name == name)
            .filter(|e| type_name.is_none_or(|t| self.entity_types[&e.type_id].name == t))
            .collect();
        match matches.as_slice() {
            [] => Err(ContextError::NotFound {
                kind: "entity",
                name: name.to_string(),
            }),
            [one] => Ok(one),
            many => Err(ContextError::Ambiguous {
                kind: "entity",
                name: name.to_string(),
                types: many.iter().map(|e| self.entity_types[&e.type_id].name.clone()).collect(),
            }),
        }
    }

    fn find_signal(&self, name: &str, type_name: Option<&str>) -> Result<&Signal, ContextError> {
        let matches: Vec<&Signal> = self
            .signals
            .values()
            .filter(|s| s.name == name)
            .filter(|s| type_name.is_none_or(|t| self.signal_types[&s.type_id].name == t))
            .collect();
        match matches.as_slice() {
            [] => Err(ContextError::NotFound {
                kind: "signal",
                name: name.to_string(),
            }),
            [one] => Ok(one),
            many => Err(ContextError::Ambiguous {
                kind: "signal",
                name: name.to_string(),
                types: many.iter().map(|s| self.signal_types[&s.type_id].name.clone()).collect(),
            }),
        }
    }

    fn parent_of(&self, child: EntityId) -> Option<EntityId> {
        self.relations
            .iter()
            .find(|r| r.kind == RelationKind::ParentOf && r.to == child)
            .map(|r| r.from)
    }

    fn children(&self, parent: EntityId) -> Vec<EntityId> {
        self.relations
            .iter()
            .filter(|r| r.kind == RelationKind::ParentOf && r.from == parent)
            .map(|r| r.to)
            .collect()
    }

    fn entity_name(&self, id: EntityId) -> String {
        self.entities.get(&id).map_or_else(|| id.to_string(), |e| e.name.clone())
    }
}

fn check_name(name: &str) -> Result<(), ContextError> {
    if name.trim().is_empty() || name.trim() != name {
        return Err(ContextError::InvalidName(name.to_string()));
    }
    Ok(())
}

pub struct ContextStore {
    state: RwLock<State>,
    journal: Option<Journal>,
}

impl ContextStore {
    pub fn in_memory() -> Self {
        Self {
            state: RwLock::new(State::default()),
            journal: None,
        }
    }

    pub fn open(dir: &Path, sync: bool) -> Result<Self, ContextError> {
        let (journal, records) = Journal::open::<Record>(&dir.join("context.jsonl"), sync)?;
        let mut state = State::default();
        for r in records {
            state.apply(r);
        }
        Ok(Self {
            state: RwLock::new(state),
            journal: Some(journal),
        })
    }

    fn commit(&self, state: &mut State, records: Vec<Record>) -> Result<(), ContextError> {
        if let Some(j) = &self.journal {
            j.append_all(&records)?;
        }
        for r in records {
            state.apply(r);
        }
        Ok(())
    }

    pub fn upsert_entity_type(&self, name: &str) -> Result<EntityType, ContextError> {
        check_name(name)?;
        let mut st = self.state.write();
        if let Some(t) = st.entity_type_named(name) {
            return Ok(t.clone());
        }
        let t = EntityType {
            id: st.fresh_id(),
            name: name.to_string(),
        };
        self.commit(&mut st, vec![Record::EntityType(t.clone())])?;
        Ok(t)
    }

    pub fn upsert_signal_type(&self, name: &str) -> Result<SignalType, ContextError> {
        check_name(name)?;
        let mut st = self.state.write();
        if let Some(t) = st.signal_type_named(name) {
            return Ok(t.clone());
        }
        let t = SignalType {
            id: st.fresh_id(),
            name: name.to_string(),
        };
        self.commit(&mut st, vec![Record::SignalType(t.clone())])?;
        Ok(t)
    }

    /// Creates the entity, or returns the existing one with the same name
    /// and type (updating its geography when one is given).
    pub fn upsert_entity(&self, name: &str, type_name: &str, geo: Option<Geo>) -> Result<Entity, ContextError> {
        check_name(name)?;
        if let Some(g) = geo {
            if !((-90.0..=90.0).contains(&g.lat) && (-180.0..=180.0).contains(&g.lon)) {
                return Err(ContextError::InvalidGeo { lat: g.lat, lon: g.lon });
            }
        }
        let mut st = self.state.write();
        let type_id = st
            .entity_type_named(type_name)
            .ok_or_else(|| ContextError::UnknownEntityType(type_name.to_string()))?
            .id;
        if let Some(e) = st.entities.values().find(|e| e.name == name && e.type_id == type_id) {
            if geo.is_none() || e.geo == geo {
                return Ok(e.clone());
            }
            let updated = Entity { geo, ..e.clone() };
            self.commit(&mut st, vec![Record::Entity(updated.clone())])?;
            return Ok(updated);
        }
        let e = Entity {
            id: st.fresh_id(),
            name: name.to_string(),
            type_id,
            geo,
        };
        self.commit(&mut st, vec![Record::Entity(e.clone())])?;
        Ok(e)
    }

    /// Creates the signal, or returns the existing one with the same name
    /// and type.
    pub fn upsert_signal(&self, name: &str, type_name: &str, unit: &str) -> Result<Signal, ContextError> {
        check_name(name)?;
        let mut st = self.state.write();
        let type_id = st
            .signal_type_named(type_name)
            .ok_or_else(|| ContextError::UnknownSignalType(type_name.to_string()))?
            .id;
        if let Some(s) = st.signals.values().find(|s| s.name == name && s.type_id == type_id) {
            return Ok(s.clone());
        }
        let s = Signal {
            id: st.fresh_id(),
            name: name.to_string(),
            type_id,
            unit: unit.to_string(),
        };
        self.commit(&mut st, vec![Record::Signal(s.clone())])?;
        Ok(s)
    }

    /// The `<signal>#sigma` sibling of `signal`, created on first use with
    /// the same type and unit.
    pub fn sigma_signal(&self, signal: SignalId) -> Result<Signal, ContextError> {
        let (name, type_name, unit) = {
            let st = self.state.read();
            let s = st.signals.get(&signal).ok_or_else(|| ContextError::NotFound {
                kind: "signal",
                name: signal.to_string(),
            })?;
            (
                format!("{}{SIGMA_SUFFIX}", s.name),
                st.signal_types[&s.type_id].name.clone(),
                s.unit.clone(),
            )
        };
        self.upsert_signal(&name, &type_name, &unit)
    }

    pub fn add_relation(&self, kind: RelationKind, from: EntityId, to: EntityId) -> Result<Relation, ContextError> {
        let mut st = self.state.write();
        for id in [from, to] {
            if !st.entities.contains_key(&id) {
                return Err(ContextError::NotFound {
                    kind: "entity",
                    name: id.to_string(),
                });
            }
        }
        if from == to {
            return Err(ContextError::SelfEdge(st.entity_name(from)));
        }
        let relation = match kind {
            RelationKind::ConnectedTo => Relation {
                kind,
                from: from.min(to),
                to: from.max(to),
            },
            RelationKind::ParentOf => Relation { kind, from, to },
        };
        if st.relations.contains(&relation) {
            return Ok(relation);
        }
        if kind == RelationKind::ParentOf {
            // `to` reaching `from` through its descendants closes a cycle.
            let mut stack = vec![to];
            let mut seen = BTreeSet::new();
            while let Some(n) = stack.pop() {
                if n == from {
                    return Err(ContextError::CycleError {
                        from: st.entity_name(from),
                        to: st.entity_name(to),
                    });
                }
                if seen.insert(n) {
                    stack.extend(st.children(n));
                }
            }
            if st.parent_of(to).is_some() {
                return Err(ContextError::MultipleParents(st.entity_name(to)));
            }
        }
        self.commit(&mut st, vec![Record::Relation(relation)])?;
        Ok(relation)
    }

    pub fn resolve_context(&self, entity: &str, signal: &str) -> Result<ContextKey, ContextError> {
        self.resolve(&ContextRef::new(entity, signal))
    }

    pub fn resolve(&self, r: &ContextRef) -> Result<ContextKey, ContextError> {
        let st = self.state.read();
        let e = st.find_entity(&r.entity, r.entity_type.as_deref())?;
        let s = st.find_signal(&r.signal, r.signal_type.as_deref())?;
        Ok(ContextKey {
            entity: e.id,
            signal: s.id,
        })
    }

    pub fn entity_by_name(&self, name: &str, type_name: Option<&str>) -> Result<Entity, ContextError> {
        self.state.read().find_entity(name, type_name).cloned()
    }

    pub fn signal_by_name(&self, name: &str, type_name: Option<&str>) -> Result<Signal, ContextError> {
        self.state.read().find_signal(name, type_name).cloned()
    }

    /// Names of a key, as a reference that resolves back to it.
    pub fn describe(&self, key: ContextKey) -> Option<ContextRef> {
        let st = self.state.read();
        let e = st.entities.get(&key.entity)?;
        let s = st.signals.get(&key.signal)?;
        let entity_ambiguous = st.entities.values().filter(|x| x.name == e.name).count() > 1;
        let signal_ambiguous = st.signals.values().filter(|x| x.name == s.name).count() > 1;
        Some(ContextRef {
            entity: e.name.clone(),
            signal: s.name.clone(),
            entity_type: entity_ambiguous.then(|| st.entity_types[&e.type_id].name.clone()),
            signal_type: signal_ambiguous.then(|| st.signal_types[&s.type_id].name.clone()),
        })
    }

    pub fn contains(&self, key: ContextKey) -> bool {
        let st = self.state.read();
        st.entities.contains_key(&key.entity) && st.signals.contains_key(&key.signal)
    }

    pub fn entity(&self, id: EntityId) -> Option<Entity> {
        self.state.read().entities.get(&id).cloned()
    }

    pub fn signal(&self, id: SignalId) -> Option<Signal> {
        self.state.read().signals.get(&id).cloned()
    }

    pub fn entities(&self) -> Vec<Entity> {
        self.state.read().entities.values().cloned().collect()
    }

    pub fn signals(&self) -> Vec<Signal> {
        self.state.read().signals.values().cloned().collect()
    }

    pub fn relations(&self) -> Vec<Relation> {
        self.state.read().relations.iter().copied().collect()
    }

    pub fn entity_type_name(&self, id: u64) -> Option<String> {
        self.state.read().entity_types.get(&id).map(|t| t.name.clone())
    }

    pub fn signal_type_name(&self, id: u64) -> Option<String> {
        self.state.read().signal_types.get(&id).map(|t| t.name.clone())
    }

    /// Entities related to `entity` by any relation, in either direction.
    pub fn neighbours(&self, entity: EntityId) -> Vec<EntityId> {
        let st = self.state.read();
        let mut out: BTreeSet<EntityId> = BTreeSet::new();
        for r in &st.relations {
            if r.from == entity {
                out.insert(r.to);
            } else if r.to == entity {
                out.insert(r.from);
            }
        }
        out.into_iter().collect()
    }

    /// All PARENT_OF descendants, breadth first and by id within a level.
    pub fn descendants(&self, entity: EntityId, max_depth: Option<usize>) -> Result<Vec<Entity>, ContextError> {
        let st = self.state.read();
        if !st.entities.contains_key(&entity) {
            return Err(ContextError::NotFound {
                kind: "entity",
                name: entity.to_string(),
            });
        }
        let mut out = Vec::new();
        let mut frontier = VecDeque::from([(entity, 0usize)]);
        while let Some((node, depth)) = frontier.pop_front() {
            if max_depth.is_some_and(|m| depth >= m) {
                continue;
            }
            let mut kids = st.children(node);
            kids.sort_unstable();
            for k in kids {
                out.push(st.entities[&k].clone());
                frontier.push_back((k, depth + 1));
            }
        }
        Ok(out)
    }

    /// Marks `key` as having a stored time series.
    pub fn bind(&self, key: ContextKey) -> Result<(), ContextError> {
        if self.state.read().bound.contains(&key) {
            return Ok(());
        }
        let mut st = self.state.write();
        if st.bound.contains(&key) {
            return Ok(());
        }
        self.commit(&mut st, vec![Record::Bind(key)])
    }

    pub fn is_bound(&self, key: ContextKey) -> bool {
        self.state.read().bound.contains(&key)
    }

    pub fn link_model(&self, link: ModelLink) -> Result<(), ContextError> {
        let mut st = self.state.write();
        if st.models.get(&link.model) == Some(&link) {
            return Ok(());
        }
        self.commit(&mut st, vec![Record::ModelLink(link)])
    }

    /// Layered graph of entities, signals, bound series and (optionally)
    /// linked models.
    pub fn export_context_graph(&self, include_models: bool) -> GraphDocument {
        let st = self.state.read();
        let entity_id = |id: EntityId| format!("entity:{id}");
        let signal_id = |id: SignalId| format!("signal:{id}");
        let series_id = |k: &ContextKey| format!("series:{}:{}", k.entity, k.signal);
        let mut doc = GraphDocument::default();
        for e in st.entities.values() {
            doc.nodes.push(GraphNode {
                id: entity_id(e.id),
                kind: NodeKind::Entity,
                label: e.name.clone(),
                geo: e.geo,
            });
        }
        for s in st.signals.values() {
            doc.nodes.push(GraphNode {
                id: signal_id(s.id),
                kind: NodeKind::Signal,
                label: s.name.clone(),
                geo: None,
            });
        }
        for r in &st.relations {
            doc.edges.push(GraphEdge {
                from: entity_id(r.from),
                to: entity_id(r.to),
                kind: match r.kind {
                    RelationKind::ParentOf => "PARENT_OF".into(),
                    RelationKind::ConnectedTo => "CONNECTED_TO".into(),
                },
            });
        }
        for k in &st.bound {
            doc.nodes.push(GraphNode {
                id: series_id(k),
                kind: NodeKind::Series,
                label: format!("{}/{}", st.entity_name(k.entity), st.signals[&k.signal].name),
                geo: None,
            });
            doc.edges.push(GraphEdge {
                from: entity_id(k.entity),
                to: series_id(k),
                kind: "HAS_SERIES".into(),
            });
            doc.edges.push(GraphEdge {
                from: signal_id(k.signal),
                to: series_id(k),
                kind: "HAS_SERIES".into(),
            });
        }
        if include_models {
            for m in st.models.values() {
                let id = format!("model:{}", m.model);
                doc.nodes.push(GraphNode {
                    id: id.clone(),
                    kind: NodeKind::Model,
                    label: m.name.clone(),
                    geo: None,
                });
                let to = if st.bound.contains(&m.target) {
                    series_id(&m.target)
                } else {
                    entity_id(m.target.entity)
                };
                doc.edges.push(GraphEdge {
                    from: id,
                    to,
                    kind: "FORECASTS".into(),
                });
            }
        }
        doc
    }
}
