//! U-Net and U-Net++ builders, segmentation forward pass and checkpoints.

pub mod unet;
pub mod unetpp;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::{self, ProbabilityField};
use crate::matrix::ClassMatrix;
use crate::nn::{Graph, Mode, ParamStore, Real, Tensor, TensorArchive, Var};
use crate::seed::{self, stream};

pub use unet::UNet;
pub use unetpp::{topology, NestedNode, NestedNodeId, NestedTrace, Source, UNetPlusPlus};

#[derive(Debug, Clone, PartialEq)]
pub struct UNetSpec {
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub dropout_rate: f64,
}

impl Default for UNetSpec {
    fn default() -> Self {
        Self { depth: 3, base_channels: 8, in_channels: 1, num_classes: 4, dropout_rate: 0.0 }
    }
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config(format!("dropout rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    /// Feature width at depth `level`: `base * 2^level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Checks that `h x w` survives `depth - 1` halvings exactly.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.depth - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(Error::config(format!("input {h}x{w} is not divisible by 2^{} = {f}", self.depth - 1)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    UNet,
    UNetPlusPlus,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::UNet => "unet",
            ModelKind::UNetPlusPlus => "unetpp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(ModelKind::UNet),
            "unetpp" | "unet++" => Ok(ModelKind::UNetPlusPlus),
            other => Err(Error::config(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Net {
    Plain(UNet),
    Nested(UNetPlusPlus),
}

/// A built network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub kind: ModelKind,
    pub spec: UNetSpec,
    pub deep_supervision: bool,
    pub store: ParamStore<T>,
    net: Net,
}

pub fn build_unet<T: Real>(spec: &UNetSpec, seed_value: u64) -> Result<Model<T>> {
    Model::build(ModelKind::UNet, spec, false, seed_value)
}

pub fn build_unetpp<T: Real>(spec: &UNetSpec, deep_supervision: bool, seed_value: u64) -> Result<Model<T>> {
    Model::build(ModelKind::UNetPlusPlus, spec, deep_supervision, seed_value)
}

impl<T: Real> Model<T> {
    /// Weights are drawn from the `INIT` stream of `seed_value`.
    pub fn build(kind: ModelKind, spec: &UNetSpec, deep_supervision: bool, seed_value: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed_value, &[stream::INIT]);
        let mut store = ParamStore::new();
        let (net, deep_supervision) = match kind {
            ModelKind::UNet => (Net::Plain(UNet::new(&mut store, spec, &mut rng)), false),
            ModelKind::UNetPlusPlus => {
                (Net::Nested(UNetPlusPlus::new(&mut store, spec, deep_supervision, false, &mut rng)), deep_supervision)
            }
        };
        Ok(Self { kind, spec: spec.clone(), deep_supervision, store, net })
    }

    pub fn nested(&self) -> Option<&UNetPlusPlus> {
        match &self.net {
            Net::Nested(n) => Some(n),
            Net::Plain(_) => None,
        }
    }

    pub fn unet(&self) -> Option<&UNet> {
        match &self.net {
            Net::Plain(n) => Some(n),
            Net::Nested(_) => None,
        }
    }

    pub fn num_heads(&self) -> usize {
        match &self.net {
            Net::Plain(_) => 1,
            Net::Nested(n) => n.heads.len(),
        }
    }

    /// Number of trainable scalars (batchnorm running statistics excluded).
    pub fn num_parameters(&self) -> usize {
        self.store.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Logits `[B, c, H, W]` of every output head, final prediction last.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode, rng: &mut impl Rng) -> Result<Vec<Var>> {
        let (_, c, h, w) = g.value(x).dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::shape(format!("model expects {} input channels, got {c}", self.spec.in_channels)));
        }
        self.spec.check_input(h, w)?;
        match &self.net {
            Net::Plain(n) => Ok(vec![n.forward(g, &mut self.store, x, mode, rng)?]),
            Net::Nested(n) => n.forward(g, &mut self.store, x, mode, rng),
        }
    }

    /// One-line description stored in checkpoints.
    pub fn describe(&self) -> String {
        let s = &self.spec;
        format!(
            "model={} depth={} base_channels={} in_channels={} num_classes={} dropout={} deep_supervision={}",
            self.kind, s.depth, s.base_channels, s.in_channels, s.num_classes, s.dropout_rate, self.deep_supervision
        )
    }

    /// Rebuilds an untrained model from [`Model::describe`] output.
    pub fn from_description(desc: &str) -> Result<Self> {
        let mut kind = None;
        let mut spec = UNetSpec::default();
        let mut ds = false;
        for tok in desc.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::config(format!("bad model field `{tok}`")))?;
            let bad = || Error::config(format!("bad value for `{k}`: `{v}`"));
            match k {
                "model" => kind = Some(v.parse()?),
                "depth" => spec.depth = v.parse().map_err(|_| bad())?,
                "base_channels" => spec.base_channels = v.parse().map_err(|_| bad())?,
                "in_channels" => spec.in_channels = v.parse().map_err(|_| bad())?,
                "num_classes" => spec.num_classes = v.parse().map_err(|_| bad())?,
                "dropout" => spec.dropout_rate = v.parse().map_err(|_| bad())?,
                "deep_supervision" => ds = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::config(format!("unknown model field `{k}`"))),
            }
        }
        let kind = kind.ok_or_else(|| Error::config("model description lacks `model=`"))?;
        Self::build(kind, &spec, ds, 0)
    }

    /// Every parameter and buffer as `f32`, plus a `model` meta line.
    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        ar.set_meta("model", self.describe());
        for p in self.store.iter() {
            ar.push_f32(&p.name, p.value.shape(), p.value.data().iter().map(|v| v.as_f64() as f32).collect());
        }
        ar
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let desc = ar.meta("model").ok_or_else(|| Error::Checkpoint {
            tensor: "-".into(),
            message: "checkpoint has no model description".into(),
        })?;
        let mut model = Self::from_description(desc)?;
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.get(id).name.clone();
            let entry = ar
                .get(&name)
                .ok_or_else(|| Error::Checkpoint { tensor: name.clone(), message: "missing from checkpoint".into() })?;
            model.store.set_value(id, entry.to_tensor()?)?;
        }
        if let Some(extra) = ar.entries.iter().find(|e| model.store.find(&e.name).is_none()) {
            return Err(Error::Checkpoint { tensor: extra.name.clone(), message: "not a parameter of this model".into() });
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}

/// Splits `[B, c, H, W]` logits into one `c x HW` matrix per image.
pub fn logits_to_matrices<T: Real>(logits: &Tensor<T>) -> Result<Vec<ClassMatrix>> {
    let (b, c, h, w) = logits.dims4()?;
    let hw = h * w;
    (0..b)
        .map(|bi| {
            let chunk = &logits.data()[bi * c * hw..(bi + 1) * c * hw];
            ClassMatrix::from_vec(c, hw, chunk.iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

/// Class probabilities of the final head in evaluation mode, one field per
/// image in the batch.
pub fn forward_segment<T: Real>(model: &mut Model<T>, batch: &Tensor<T>) -> Result<Vec<ProbabilityField>> {
    let mut g = Graph::new();
    let x = g.input(batch.clone());
    // evaluation mode draws nothing from the generator
    let mut rng = seed::rng(0, &[]);
    let heads = model.forward(&mut g, x, Mode::Eval, &mut rng)?;
    let last = *heads.last().expect("at least one head");
    if !g.value(last).is_finite() {
        return Err(Error::Numeric("model produced non-finite logits".into()));
    }
    logits_to_matrices(g.value(last))?.iter().map(loss::softmax).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> UNetSpec {
        UNetSpec { depth: 2, base_channels: 4, in_channels: 1, num_classes: 2, dropout_rate: 0.0 }
    }

    fn input(b: usize, h: usize, w: usize, seed_value: u64) -> Tensor<f32> {
        let mut rng = seed::rng(seed_value, &[]);
        Tensor::new(&[b, 1, h, w], (0..b * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn logits_shape(model: &mut Model<f32>, x: Tensor<f32>) -> Vec<Vec<usize>> {
        let mut g = Graph::new();
        let xv = g.input(x);
        let heads = model.forward(&mut g, xv, Mode::Train, &mut seed::rng(1, &[])).unwrap();
        heads.iter().map(|&v| g.shape(v).to_vec()).collect()
    }

    #[test]
    fn unet_output_shape() {
        let spec = UNetSpec { depth: 3, base_channels: 8, in_channels: 1, num_classes: 4, dropout_rate: 0.0 };
        let mut m = build_unet::<f32>(&spec, 0).unwrap();
        assert_eq!(logits_shape(&mut m, input(2, 32, 32, 0)), vec![vec![2, 4, 32, 32]]);
    }

    #[test]
    fn unet_skip_concat_width() {
        let spec = UNetSpec { depth: 3, base_channels: 8, in_channels: 1, num_classes: 4, dropout_rate: 0.0 };
        let m = build_unet::<f32>(&spec, 0).unwrap();
        for (k, dec) in m.unet().unwrap().decoders.iter().enumerate() {
            assert_eq!(dec.in_channels(), 2 * (8 << k));
        }
    }

    #[test]
    fn unet_parameter_count_matches_hand_tally() {
        // enc0: 1->4 conv (36+4), bn (8), 4->4 conv (144+4), bn (8)
        // enc1: 4->8 conv (288+8), bn (16), 8->8 conv (576+8), bn (16)
        // up0: 8->4 transposed 2x2 (128+4)
        // dec0: 8->4 conv (288+4), bn (8), 4->4 conv (144+4), bn (8)
        // head: 4->2 1x1 conv (8+2)
        let tally = (40 + 8 + 148 + 8) + (296 + 16 + 584 + 16) + 132 + (292 + 8 + 148 + 8) + 10;
        assert_eq!(tally, 1714);
        assert_eq!(build_unet::<f32>(&toy(), 0).unwrap().num_parameters(), tally);
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let mut m = build_unet::<f32>(&UNetSpec::default(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(input(1, 30, 32, 0));
        let err = m.forward(&mut g, x, Mode::Eval, &mut seed::rng(0, &[])).unwrap_err();
        assert!(err.is_config(), "{err:?}");
    }

    #[test]
    fn spec_validation() {
        assert!(UNetSpec { depth: 1, ..toy() }.validate().is_err());
        assert!(UNetSpec { num_classes: 1, ..toy() }.validate().is_err());
        assert!(UNetSpec { dropout_rate: 1.0, ..toy() }.validate().is_err());
    }

    #[test]
    fn unetpp_node_count_and_in_degree() {
        for l in 2..=4 {
            let spec = UNetSpec { depth: l, ..toy() };
            let m = build_unetpp::<f32>(&spec, false, 0).unwrap();
            let net = m.nested().unwrap();
            assert_eq!(net.nodes.len(), l * (l + 1) / 2);
            for n in &net.nodes {
                assert!(n.id.i + n.id.j < l);
                if n.id.j > 0 {
                    assert_eq!(n.in_degree(), n.id.j + 1);
                }
            }
        }
    }

    #[test]
    fn unetpp_node_input_width() {
        let spec = UNetSpec { depth: 3, ..toy() };
        let m = build_unetpp::<f32>(&spec, false, 0).unwrap();
        let n02 = m.nested().unwrap().node(NestedNodeId::new(0, 2)).unwrap();
        let ch0 = spec.channels(0);
        assert_eq!(n02.block.in_channels(), 2 * ch0 + n02.up.as_ref().unwrap().out_channels);
        assert_eq!(n02.up.as_ref().unwrap().in_channels, spec.channels(1));
    }

    #[test]
    fn unetpp_heads() {
        let spec = UNetSpec { depth: 3, ..toy() };
        let mut plain = build_unetpp::<f32>(&spec, false, 0).unwrap();
        assert_eq!(plain.nested().unwrap().heads.iter().map(|h| h.0).collect::<Vec<_>>(), vec![NestedNodeId::new(0, 2)]);
        let mut ds = build_unetpp::<f32>(&spec, true, 0).unwrap();
        assert_eq!(ds.num_heads(), 2);
        assert_eq!(logits_shape(&mut plain, input(2, 16, 16, 1)), vec![vec![2, 2, 16, 16]]);
        assert_eq!(logits_shape(&mut ds, input(2, 16, 16, 1)), vec![vec![2, 2, 16, 16]; 2]);
    }

    #[test]
    fn unetpp_graph_wiring_follows_recurrence() {
        for l in 2..=4 {
            let spec = UNetSpec { depth: l, ..toy() };
            let mut m = build_unetpp::<f32>(&spec, true, 3).unwrap();
            let net = m.nested().unwrap().clone();
            let mut g = Graph::new();
            let x = g.input(input(2, 16, 16, 2));
            let trace = net.forward_traced(&mut g, &mut m.store, x, Mode::Train, &mut seed::rng(0, &[])).unwrap();
            for n in net.nodes.iter().filter(|n| n.id.j > 0) {
                let cat = trace.block_input(n.id).unwrap();
                assert_eq!(g.op_name(cat), "concat");
                let inputs = g.op_inputs(cat);
                assert_eq!(inputs.len(), n.id.j + 1);
                for k in 0..n.id.j {
                    assert_eq!(inputs[k], trace.output(NestedNodeId::new(n.id.i, k)).unwrap());
                }
                let up = trace.upsampled(n.id).unwrap();
                assert_eq!(inputs[n.id.j], up);
                assert_eq!(g.op_name(up), "upconv2");
                assert_eq!(g.op_inputs(up)[0], trace.output(NestedNodeId::new(n.id.i + 1, n.id.j - 1)).unwrap());
            }
        }
    }

    #[test]
    fn pruned_unetpp_is_a_unet() {
        for l in 2..=4 {
            let spec = UNetSpec { depth: l, ..toy() };
            let mut store = ParamStore::<f32>::new();
            let pruned = UNetPlusPlus::new(&mut store, &spec, true, true, &mut seed::rng(0, &[]));
            assert_eq!(pruned.nodes.len(), 2 * l - 1);
            assert_eq!(pruned.heads.len(), 1);
            let unet = build_unet::<f32>(&spec, 0).unwrap();
            let count: usize = store.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum();
            assert_eq!(count, unet.num_parameters());

            let mut g = Graph::new();
            let x = g.input(input(1, 16, 16, 0));
            let out = pruned.forward(&mut g, &mut store, x, Mode::Eval, &mut seed::rng(0, &[])).unwrap();
            assert_eq!(g.shape(out[0]), &[1, 2, 16, 16]);
        }
    }

    #[test]
    fn segment_columns_sum_to_one_and_duplicates_match() {
        for kind in [ModelKind::UNet, ModelKind::UNetPlusPlus] {
            let spec = UNetSpec { depth: 3, dropout_rate: 0.3, ..toy() };
            let mut m = Model::<f32>::build(kind, &spec, true, 4).unwrap();
            let one = input(1, 16, 16, 9);
            let mut data = one.data().to_vec();
            data.extend_from_slice(one.data());
            let batch = Tensor::new(&[2, 1, 16, 16], data).unwrap();
            let out = forward_segment(&mut m, &batch).unwrap();
            assert_eq!(out.len(), 2);
            assert!(out[0].0.max_column_sum_error() < 1e-9);
            assert_eq!(out[0], out[1]);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let spec = UNetSpec { depth: 3, dropout_rate: 0.1, ..toy() };
        let m = build_unetpp::<f32>(&spec, true, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save_checkpoint(&path).unwrap();
        let back = Model::<f32>::load_checkpoint(&path).unwrap();
        assert_eq!(back.describe(), m.describe());
        for (a, b) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn checkpoint_errors_name_the_tensor() {
        let m = build_unet::<f32>(&toy(), 0).unwrap();
        let mut ar = m.to_archive();
        ar.entries.retain(|e| e.name != "dec0.conv2.weight");
        let err = Model::<f32>::from_archive(&ar).unwrap_err();
        assert!(err.to_string().contains("dec0.conv2.weight"), "{err}");

        let mut ar = m.to_archive();
        let e = ar.entries.iter_mut().find(|e| e.name == "enc1.bn1.gamma").unwrap();
        e.shape = vec![2, 4];
        let err = Model::<f32>::from_archive(&ar).unwrap_err();
        assert!(err.to_string().contains("enc1.bn1.gamma"), "{err}");
    }

    #[test]
    fn description_round_trip() {
        let m = build_unetpp::<f32>(&UNetSpec { dropout_rate: 0.25, ..UNetSpec::default() }, true, 0).unwrap();
        let back = Model::<f32>::from_description(&m.describe()).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!((back.kind, back.deep_supervision), (m.kind, m.deep_supervision));
    }
}
