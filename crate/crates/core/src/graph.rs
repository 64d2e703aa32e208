//! Job specification and the validated dataflow graph built from it.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::channel::Channel;
use crate::error::{Error, Result};
use crate::ids::{ChannelId, InstanceId, OperatorId, Tick};
use crate::state::RoutingTable;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Source,
    KeyedAggregate,
    SlidingWindow,
    Sink,
}

impl OperatorKind {
    pub fn is_stateful(self) -> bool {
        matches!(
            self,
            OperatorKind::KeyedAggregate | OperatorKind::SlidingWindow
        )
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partitioning {
    Keyed,
    Broadcast,
    Forward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorSpec {
    pub id: String,
    pub kind: OperatorKind,
    pub parallelism: u32,
    /// Keyed aggregate: emit `(key, sum, count)` every this many records per key.
    #[serde(default = "default_emit_every")]
    pub emit_every: u64,
    #[serde(default = "default_window_size")]
    pub window_size: Tick,
    #[serde(default = "default_window_slide")]
    pub window_slide: Tick,
}

fn default_emit_every() -> u64 {
    10
}
fn default_window_size() -> Tick {
    1000
}
fn default_window_slide() -> Tick {
    500
}

impl OperatorSpec {
    pub fn new(id: &str, kind: OperatorKind, parallelism: u32) -> Self {
        OperatorSpec {
            id: id.to_string(),
            kind,
            parallelism,
            emit_every: default_emit_every(),
            window_size: default_window_size(),
            window_slide: default_window_slide(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub from: String,
    pub to: String,
    pub partitioning: Partitioning,
}

/// The job configuration document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub num_keygroups: u32,
    #[serde(default = "default_capacity")]
    pub channel_capacity: usize,
    /// Output-cache length at which a sender stalls. Defaults to `channel_capacity`.
    #[serde(default)]
    pub output_cache_capacity: Option<usize>,
    #[serde(default = "default_latency")]
    pub network_latency: Tick,
    #[serde(default)]
    pub latency_jitter: Tick,
    #[serde(default)]
    pub seed: u64,
    pub operators: Vec<OperatorSpec>,
    pub edges: Vec<EdgeSpec>,
}

fn default_capacity() -> usize {
    1000
}
fn default_latency() -> Tick {
    1
}

impl JobSpec {
    /// generator → keyed aggregator → sink.
    pub fn three_operator(num_keygroups: u32, sources: u32, aggregators: u32) -> Self {
        JobSpec {
            num_keygroups,
            channel_capacity: default_capacity(),
            output_cache_capacity: None,
            network_latency: default_latency(),
            latency_jitter: 0,
            seed: 0,
            operators: vec![
                OperatorSpec::new("gen", OperatorKind::Source, sources),
                OperatorSpec::new("agg", OperatorKind::KeyedAggregate, aggregators),
                OperatorSpec::new("sink", OperatorKind::Sink, 1),
            ],
            edges: vec![
                EdgeSpec {
                    from: "gen".into(),
                    to: "agg".into(),
                    partitioning: Partitioning::Keyed,
                },
                EdgeSpec {
                    from: "agg".into(),
                    to: "sink".into(),
                    partitioning: Partitioning::Forward,
                },
            ],
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn output_cache_capacity(&self) -> usize {
        self.output_cache_capacity.unwrap_or(self.channel_capacity)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorNode {
    pub id: OperatorId,
    pub spec: OperatorSpec,
    pub instances: Vec<InstanceId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Edge {
    pub from: OperatorId,
    pub to: OperatorId,
    pub partitioning: Partitioning,
}

#[derive(Clone, Debug)]
pub struct DataflowGraph {
    pub num_keygroups: u32,
    pub operators: Vec<OperatorNode>,
    pub edges: Vec<Edge>,
    /// Owning operator of every instance, indexed by instance id.
    pub instance_operator: Vec<OperatorId>,
    pub channels: Vec<Channel>,
    channel_index: BTreeMap<(InstanceId, InstanceId), ChannelId>,
    /// Routing table per (upstream instance, downstream keyed operator).
    pub routing: BTreeMap<(InstanceId, OperatorId), RoutingTable>,
    channel_capacity: usize,
}

/// Validates `spec` and constructs instances, channels and routing tables.
pub fn build_graph(spec: &JobSpec) -> Result<DataflowGraph> {
    if spec.num_keygroups == 0 {
        return Err(Error::InvalidPartitioning(
            "num_keygroups must be positive".into(),
        ));
    }
    let mut by_name = BTreeMap::new();
    for (i, op) in spec.operators.iter().enumerate() {
        if op.parallelism == 0 {
            return Err(Error::InvalidSpec(format!(
                "operator `{}` has parallelism 0",
                op.id
            )));
        }
        if op.parallelism > spec.num_keygroups {
            return Err(Error::InvalidPartitioning(format!(
                "operator `{}` parallelism {} exceeds {} key-groups",
                op.id, op.parallelism, spec.num_keygroups
            )));
        }
        if by_name
            .insert(op.id.clone(), OperatorId(i as u32))
            .is_some()
        {
            return Err(Error::InvalidSpec(format!(
                "duplicate operator `{}`",
                op.id
            )));
        }
    }
    if !spec
        .operators
        .iter()
        .any(|o| o.kind == OperatorKind::Source)
    {
        return Err(Error::InvalidSpec("job needs at least one source".into()));
    }
    if !spec.operators.iter().any(|o| o.kind == OperatorKind::Sink) {
        return Err(Error::InvalidSpec("job needs at least one sink".into()));
    }
    let lookup = |name: &str| {
        by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownOperator(name.to_string()))
    };
    let mut edges = Vec::new();
    for e in &spec.edges {
        edges.push(Edge {
            from: lookup(&e.from)?,
            to: lookup(&e.to)?,
            partitioning: e.partitioning,
        });
    }
    check_acyclic(&spec.operators, &edges)?;
    for e in &edges {
        let to = &spec.operators[e.to.index()];
        if to.kind.is_stateful() && e.partitioning != Partitioning::Keyed {
            return Err(Error::InvalidPartitioning(format!(
                "edge into stateful operator `{}` must be keyed",
                to.id
            )));
        }
    }

    let mut graph = DataflowGraph {
        num_keygroups: spec.num_keygroups,
        operators: Vec::new(),
        edges,
        instance_operator: Vec::new(),
        channels: Vec::new(),
        channel_index: BTreeMap::new(),
        routing: BTreeMap::new(),
        channel_capacity: spec.channel_capacity,
    };
    for (i, op) in spec.operators.iter().enumerate() {
        let id = OperatorId(i as u32);
        graph.operators.push(OperatorNode {
            id,
            spec: op.clone(),
            instances: Vec::new(),
        });
        for _ in 0..op.parallelism {
            graph.add_instance(id);
        }
    }
    for e in graph.edges.clone() {
        let ups = graph.operators[e.from.index()].instances.clone();
        let downs = graph.operators[e.to.index()].instances.clone();
        for &u in &ups {
            for &d in &downs {
                graph.connect(u, d);
            }
            if e.partitioning == Partitioning::Keyed {
                graph
                    .routing
                    .insert((u, e.to), RoutingTable::uniform(spec.num_keygroups, &downs));
            }
        }
    }
    Ok(graph)
}

fn check_acyclic(ops: &[OperatorSpec], edges: &[Edge]) -> Result<()> {
    let n = ops.len();
    let mut indeg = vec![0usize; n];
    for e in edges {
        indeg[e.to.index()] += 1;
    }
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        for e in edges.iter().filter(|e| e.from.index() == i) {
            indeg[e.to.index()] -= 1;
            if indeg[e.to.index()] == 0 {
                queue.push_back(e.to.index());
            }
        }
    }
    if seen < n {
        let culprit = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
        return Err(Error::GraphCycle(ops[culprit].id.clone()));
    }
    Ok(())
}

impl DataflowGraph {
    pub fn operator(&self, id: OperatorId) -> &OperatorNode {
        &self.operators[id.index()]
    }

    pub fn operator_by_name(&self, name: &str) -> Result<OperatorId> {
        self.operators
            .iter()
            .find(|o| o.spec.id == name)
            .map(|o| o.id)
            .ok_or_else(|| Error::UnknownOperator(name.to_string()))
    }

    pub fn operator_of(&self, inst: InstanceId) -> OperatorId {
        self.instance_operator[inst.index()]
    }

    pub fn num_instances(&self) -> usize {
        self.instance_operator.len()
    }

    /// Registers a fresh instance of `op` without wiring.
    pub fn add_instance(&mut self, op: OperatorId) -> InstanceId {
        let id = InstanceId(self.instance_operator.len() as u32);
        self.instance_operator.push(op);
        self.operators[op.index()].instances.push(id);
        id
    }

    pub fn connect(&mut self, sender: InstanceId, receiver: InstanceId) -> ChannelId {
        if let Some(&c) = self.channel_index.get(&(sender, receiver)) {
            return c;
        }
        let id = ChannelId(self.channels.len() as u32);
        self.channels
            .push(Channel::new(id, sender, receiver, self.channel_capacity));
        self.channel_index.insert((sender, receiver), id);
        id
    }

    pub fn channel_between(&self, sender: InstanceId, receiver: InstanceId) -> Option<ChannelId> {
        self.channel_index.get(&(sender, receiver)).copied()
    }

    pub fn channel(&self, id: ChannelId) -> &Channel {
        &self.channels[id.index()]
    }

    pub fn channel_mut(&mut self, id: ChannelId) -> &mut Channel {
        &mut self.channels[id.index()]
    }

    /// Two distinct channels borrowed mutably.
    pub fn channel_pair_mut(&mut self, a: ChannelId, b: ChannelId) -> (&mut Channel, &mut Channel) {
        assert_ne!(a, b);
        if a.index() < b.index() {
            let (x, y) = self.channels.split_at_mut(b.index());
            (&mut x[a.index()], &mut y[0])
        } else {
            let (x, y) = self.channels.split_at_mut(a.index());
            (&mut y[0], &mut x[b.index()])
        }
    }

    pub fn inputs_of(&self, inst: InstanceId) -> Vec<ChannelId> {
        self.channels
            .iter()
            .filter(|c| c.receiver == inst)
            .map(|c| c.id)
            .collect()
    }

    pub fn upstream_ops(&self, op: OperatorId) -> Vec<OperatorId> {
        self.edges
            .iter()
            .filter(|e| e.to == op)
            .map(|e| e.from)
            .collect()
    }

    pub fn downstream_edges(&self, op: OperatorId) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(move |e| e.from == op)
    }

    /// Instances of the operators feeding `op`.
    pub fn predecessors(&self, op: OperatorId) -> Vec<InstanceId> {
        self.upstream_ops(op)
            .into_iter()
            .flat_map(|u| self.operators[u.index()].instances.clone())
            .collect()
    }

    pub fn routing_table(&self, upstream: InstanceId, op: OperatorId) -> Option<&RoutingTable> {
        self.routing.get(&(upstream, op))
    }

    pub fn routing_table_mut(
        &mut self,
        upstream: InstanceId,
        op: OperatorId,
    ) -> Option<&mut RoutingTable> {
        self.routing.get_mut(&(upstream, op))
    }

    pub fn sources(&self) -> impl Iterator<Item = &OperatorNode> {
        self.operators
            .iter()
            .filter(|o| o.spec.kind == OperatorKind::Source)
    }

    pub fn sinks(&self) -> impl Iterator<Item = &OperatorNode> {
        self.operators
            .iter()
            .filter(|o| o.spec.kind == OperatorKind::Sink)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::KeyGroupId;

    #[test]
    fn three_operator_graph_has_uniform_routing() {
        let g = build_graph(&JobSpec::three_operator(4, 1, 2)).unwrap();
        let agg = g.operator_by_name("agg").unwrap();
        let gen = g.operator(g.operator_by_name("gen").unwrap()).instances[0];
        let aggs = &g.operator(agg).instances;
        let t = g.routing_table(gen, agg).unwrap();
        let owners: Vec<_> = (0..4)
            .map(|kg| t.owner_of(KeyGroupId(kg)).unwrap())
            .collect();
        assert_eq!(owners, vec![aggs[0], aggs[0], aggs[1], aggs[1]]);
        // gen→agg×2 plus agg×2→sink
        assert_eq!(g.channels.len(), 4);
    }

    #[test]
    fn self_loop_is_a_cycle() {
        let mut spec = JobSpec::three_operator(4, 1, 2);
        spec.edges.push(EdgeSpec {
            from: "agg".into(),
            to: "agg".into(),
            partitioning: Partitioning::Keyed,
        });
        assert!(matches!(build_graph(&spec), Err(Error::GraphCycle(_))));
    }

    #[test]
    fn parallelism_above_keygroups_is_rejected() {
        let spec = JobSpec::three_operator(4, 1, 5);
        assert!(matches!(
            build_graph(&spec),
            Err(Error::InvalidPartitioning(_))
        ));
    }

    #[test]
    fn missing_sink_is_rejected() {
        let mut spec = JobSpec::three_operator(4, 1, 2);
        spec.operators.retain(|o| o.kind != OperatorKind::Sink);
        spec.edges.retain(|e| e.to != "sink");
        assert!(matches!(build_graph(&spec), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn toml_round_trip() {
        let spec = JobSpec::three_operator(32, 2, 2);
        let text = toml::to_string(&spec).unwrap();
        assert_eq!(JobSpec::from_toml(&text).unwrap(), spec);
    }
}
