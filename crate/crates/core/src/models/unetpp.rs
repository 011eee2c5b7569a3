//! Nested U-Net (U-Net++).
//!
//! Node `x^{i,j}` sits at depth `i` and skip column `j`, for `i + j <= L - 1`.
//! Column 0 is the encoder backbone. Every other node applies a conv block
//! to the channel concatenation of all earlier nodes in its row and the
//! up-convolved node diagonally below:
//!
//! ```text
//! x^{i,j} = H([x^{i,0}, ..., x^{i,j-1}, U(x^{i+1,j-1})])
//! ```

use std::fmt;

use rand::Rng;

use crate::error::Result;
use crate::nn::{Conv2dLayer, ConvBlock, Graph, Mode, ParamStore, Real, UpConvLayer, Var};

use super::UNetSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NestedNodeId {
    pub i: usize,
    pub j: usize,
}

impl NestedNodeId {
    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }
}

impl fmt::Display for NestedNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "x{}_{}", self.i, self.j)
    }
}

/// One input edge of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// The network input.
    Input,
    /// Max-pooled output of the node one level up.
    Pooled(NestedNodeId),
    /// Output of an earlier node in the same row.
    Skip(NestedNodeId),
    /// Up-convolved output of the node one level down.
    Upsampled(NestedNodeId),
}

#[derive(Debug, Clone)]
pub struct NestedNode {
    pub id: NestedNodeId,
    pub sources: Vec<Source>,
    pub up: Option<UpConvLayer>,
    pub block: ConvBlock,
}

impl NestedNode {
    pub fn in_degree(&self) -> usize {
        self.sources.len()
    }
}

/// Vars produced by one forward pass, for inspecting the built graph.
#[derive(Debug, Clone, Default)]
pub struct NestedTrace {
    /// Output of every node's conv block.
    pub outputs: Vec<(NestedNodeId, Var)>,
    /// What each node's conv block consumed (a concat node when `j > 0`).
    pub block_inputs: Vec<(NestedNodeId, Var)>,
    /// Up-convolution output feeding each `j > 0` node.
    pub upsampled: Vec<(NestedNodeId, Var)>,
    /// Logits, one per output head.
    pub heads: Vec<Var>,
}

impl NestedTrace {
    fn find(list: &[(NestedNodeId, Var)], id: NestedNodeId) -> Option<Var> {
        list.iter().find(|(n, _)| *n == id).map(|&(_, v)| v)
    }

    pub fn output(&self, id: NestedNodeId) -> Option<Var> {
        Self::find(&self.outputs, id)
    }

    pub fn block_input(&self, id: NestedNodeId) -> Option<Var> {
        Self::find(&self.block_inputs, id)
    }

    pub fn upsampled(&self, id: NestedNodeId) -> Option<Var> {
        Self::find(&self.upsampled, id)
    }
}

/// Node list in evaluation order (column by column). With `pruned`, only
/// the backbone and the outer decoder diagonal remain and each decoder
/// node sees just the backbone skip, which is the plain U-Net wiring.
pub fn topology(depth: usize, pruned: bool) -> Vec<(NestedNodeId, Vec<Source>)> {
    let mut out = Vec::new();
    for j in 0..depth {
        for i in 0..depth - j {
            let id = NestedNodeId::new(i, j);
            let sources = if j == 0 {
                vec![if i == 0 { Source::Input } else { Source::Pooled(NestedNodeId::new(i - 1, 0)) }]
            } else if pruned {
                if i + j != depth - 1 {
                    continue;
                }
                vec![Source::Skip(NestedNodeId::new(i, 0)), Source::Upsampled(NestedNodeId::new(i + 1, j - 1))]
            } else {
                let mut s: Vec<Source> = (0..j).map(|k| Source::Skip(NestedNodeId::new(i, k))).collect();
                s.push(Source::Upsampled(NestedNodeId::new(i + 1, j - 1)));
                s
            };
            out.push((id, sources));
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct UNetPlusPlus {
    pub nodes: Vec<NestedNode>,
    /// `(node, 1x1 conv)` pairs; the last one is the final prediction.
    pub heads: Vec<(NestedNodeId, Conv2dLayer)>,
}

impl UNetPlusPlus {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        spec: &UNetSpec,
        deep_supervision: bool,
        pruned: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let l = spec.depth;
        let nodes = topology(l, pruned)
            .into_iter()
            .map(|(id, sources)| {
                let width = spec.channels(id.i);
                let name = id.to_string();
                let (cin, up) = if id.j == 0 {
                    (if id.i == 0 { spec.in_channels } else { spec.channels(id.i - 1) }, None)
                } else {
                    let up = UpConvLayer::new(store, &format!("{name}.up"), spec.channels(id.i + 1), width, rng);
                    (sources.len() * width, Some(up))
                };
                let block = ConvBlock::new(store, &name, cin, width, spec.dropout_rate, rng);
                NestedNode { id, sources, up, block }
            })
            .collect();
        let head_cols: Vec<usize> = if deep_supervision && !pruned { (1..l).collect() } else { vec![l - 1] };
        let heads = head_cols
            .into_iter()
            .map(|j| (NestedNodeId::new(0, j), Conv2dLayer::new(store, &format!("head{j}"), spec.channels(0), spec.num_classes, 1, rng)))
            .collect();
        Self { nodes, heads }
    }

    pub fn node(&self, id: NestedNodeId) -> Option<&NestedNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn forward_traced<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<NestedTrace> {
        let mut trace = NestedTrace::default();
        for node in &self.nodes {
            let mut parts = Vec::with_capacity(node.sources.len());
            for src in &node.sources {
                let v = match *src {
                    Source::Input => x,
                    Source::Pooled(id) => {
                        let h = trace.output(id).expect("evaluated earlier");
                        g.maxpool2(h)?
                    }
                    Source::Skip(id) => trace.output(id).expect("evaluated earlier"),
                    Source::Upsampled(id) => {
                        let h = trace.output(id).expect("evaluated earlier");
                        let u = node.up.as_ref().expect("j > 0 nodes own an up-conv").forward(g, store, h)?;
                        trace.upsampled.push((node.id, u));
                        u
                    }
                };
                parts.push(v);
            }
            let input = if parts.len() == 1 { parts[0] } else { g.concat_all(&parts)? };
            let out = node.block.forward(g, store, input, mode, rng)?;
            trace.block_inputs.push((node.id, input));
            trace.outputs.push((node.id, out));
        }
        for (id, head) in &self.heads {
            let h = trace.output(*id).expect("head node exists");
            trace.heads.push(head.forward(g, store, h)?);
        }
        Ok(trace)
    }

    /// Logits of every head, final head last.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &mut ParamStore<T>,
        x: Var,
        mode: Mode,
        rng: &mut impl Rng,
    ) -> Result<Vec<Var>> {
        Ok(self.forward_traced(g, store, x, mode, rng)?.heads)
    }
}
