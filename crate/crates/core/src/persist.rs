//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BSR1"                      magic
//! u16                         format version (1)
//! u8                          kind: 0 classifier, 1 sgan_full, 2 knn, 3 tree
//! u32, (u32 len, utf-8)*      class names
//! body                        kind specific, see below
//! [u8; 32]                    SHA-256 of every preceding byte
//! ```
//!
//! A network is `u32` layer count, then per layer `u32 in, u32 out,
//! u8 activation code, f64 dropout rate`, then a `u64` declared parameter
//! count and that many `f32` values, layer-major, weights (row-major,
//! `out × in`) before biases.
//!
//! * classifier: one network (the trunk).
//! * sgan_full: trunk, discriminator head, generator, then three Adam states
//!   (discriminator, classifier, generator). An Adam state is
//!   `f64 lr, beta1, beta2, epsilon`, `u64 t`, `u32` tensor count, and per
//!   tensor `u64 len` followed by `len` `f64` first moments and `len` `f64`
//!   second moments.
//! * knn: `u32 k`, `u32 n`, `n` `u32` labels, `n × 256` `f32` points.
//! * tree: pre-order nodes. `u8 0` leaf: `u32 label`, one `u32` count per
//!   class. `u8 1` split: `u16 feature`, `f64 threshold`, left, right.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::baselines::{DecisionTree, KnnModel, TreeNode};
use crate::corpus::ClassMap;
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::features::BINS;
use crate::ndmath::{Activation, AdamConfig, AdamState, DenseLayer, DenseNet, Matrix, Mode};
use crate::sgan::{Classifier, SganModel, SganOptimizers};

pub const MAGIC: [u8; 4] = *b"BSR1";
pub const FORMAT_VERSION: u16 = 1;
const HASH_LEN: usize = 32;
const HEADER_LEN: usize = 4 + 2 + 1;
/// Deepest tree accepted on load, to bound recursion on hostile input.
const MAX_TREE_DEPTH: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Classifier,
    SganFull,
    Knn,
    Tree,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::Classifier => 0,
            ModelKind::SganFull => 1,
            ModelKind::Knn => 2,
            ModelKind::Tree => 3,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => ModelKind::Classifier,
            1 => ModelKind::SganFull,
            2 => ModelKind::Knn,
            3 => ModelKind::Tree,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Classifier => "classifier",
            ModelKind::SganFull => "sgan_full",
            ModelKind::Knn => "knn",
            ModelKind::Tree => "tree",
        }
    }
}

/// Everything needed to resume SGAN training.
#[derive(Debug, Clone, PartialEq)]
pub struct SganCheckpoint {
    pub model: SganModel,
    pub optimizers: SganOptimizers,
    pub classes: ClassMap,
}

impl SganCheckpoint {
    /// Trunk of the checkpoint as an inference classifier.
    pub fn classifier(&self) -> Result<Classifier> {
        Classifier::new(self.model.trunk.clone(), self.classes.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SavedModel {
    Classifier(Classifier),
    SganFull(Box<SganCheckpoint>),
    Knn(KnnModel),
    Tree(DecisionTree),
}

impl SavedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            SavedModel::Classifier(_) => ModelKind::Classifier,
            SavedModel::SganFull(_) => ModelKind::SganFull,
            SavedModel::Knn(_) => ModelKind::Knn,
            SavedModel::Tree(_) => ModelKind::Tree,
        }
    }

    pub fn classes(&self) -> &ClassMap {
        match self {
            SavedModel::Classifier(c) => c.classes(),
            SavedModel::SganFull(c) => &c.classes,
            SavedModel::Knn(m) => m.classes(),
            SavedModel::Tree(t) => t.classes(),
        }
    }

    pub fn into_predictor(self) -> Result<Box<dyn Predictor + Send>> {
        Ok(match self {
            SavedModel::Classifier(c) => Box::new(c),
            SavedModel::SganFull(c) => Box::new(c.classifier()?),
            SavedModel::Knn(m) => Box::new(m),
            SavedModel::Tree(t) => Box::new(t),
        })
    }
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in u32")))?;
        self.buf.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f32(&mut self, v: f64) {
        self.buf.extend_from_slice(&(v as f32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn classes(&mut self, classes: &ClassMap) -> Result<()> {
        self.u32(classes.len())?;
        for name in classes.names() {
            self.u32(name.len())?;
            self.buf.extend_from_slice(name.as_bytes());
        }
        Ok(())
    }

    fn net(&mut self, net: &DenseNet) -> Result<()> {
        self.u32(net.layers().len())?;
        for layer in net.layers() {
            self.u32(layer.inputs())?;
            self.u32(layer.outputs())?;
            self.u8(layer.activation.code());
            self.f64(layer.dropout_rate);
        }
        self.u64(net.param_count() as u64);
        for layer in net.layers() {
            layer.weights.as_slice().iter().for_each(|&w| self.f32(w));
            layer.biases.iter().for_each(|&b| self.f32(b));
        }
        Ok(())
    }

    fn adam(&mut self, state: &AdamState) -> Result<()> {
        let c = state.config;
        for v in [c.lr, c.beta1, c.beta2, c.epsilon] {
            self.f64(v);
        }
        self.u64(state.t);
        self.u32(state.m.len())?;
        for (m, v) in state.m.iter().zip(&state.v) {
            self.u64(m.len() as u64);
            m.iter().for_each(|&x| self.f64(x));
            v.iter().for_each(|&x| self.f64(x));
        }
        Ok(())
    }

    fn tree(&mut self, node: &TreeNode) -> Result<()> {
        match node {
            TreeNode::Leaf { label, class_counts } => {
                self.u8(0);
                self.u32(*label)?;
                for &c in class_counts {
                    self.u32(c as usize)?;
                }
            }
            TreeNode::Internal {
                feature,
                threshold,
                left,
                right,
            } => {
                self.u8(1);
                self.u16(*feature as u16);
                self.f64(*threshold);
                self.tree(left)?;
                self.tree(right)?;
            }
        }
        Ok(())
    }
}

/// Serialize `model` into the on-disk layout.
pub fn to_bytes(model: &SavedModel) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(model.kind().code());
    w.classes(model.classes())?;
    match model {
        SavedModel::Classifier(c) => w.net(c.net())?,
        SavedModel::SganFull(c) => {
            w.net(&c.model.trunk)?;
            w.net(&c.model.disc_head)?;
            w.net(&c.model.gen)?;
            w.adam(&c.optimizers.disc)?;
            w.adam(&c.optimizers.class)?;
            w.adam(&c.optimizers.gen)?;
        }
        SavedModel::Knn(m) => {
            w.u32(m.k())?;
            w.u32(m.labels().len())?;
            for &l in m.labels() {
                w.u32(l)?;
            }
            for p in m.points() {
                p.iter().for_each(|&v| w.f32(v));
            }
        }
        SavedModel::Tree(t) => w.tree(t.root())?,
    }
    let hash = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&hash);
    Ok(w.buf)
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::CountMismatch(format!("payload ends before byte {}", self.pos.saturating_add(n))))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.array()?) as f64)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    /// Guard allocations: `count` items of `size` bytes must still fit.
    fn expect_room(&self, count: u64, size: u64, what: &str) -> Result<usize> {
        let left = (self.data.len() - self.pos) as u64;
        match count.checked_mul(size) {
            Some(bytes) if bytes <= left => Ok(count as usize),
            _ => Err(Error::CountMismatch(format!("{what}: {count} entries do not fit in {left} bytes"))),
        }
    }

    fn classes(&mut self) -> Result<ClassMap> {
        let n = self.u32()?;
        let n = self.expect_room(n as u64, 4, "class names")?;
        let mut names = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u32()?;
            let bytes = self.take(len)?;
            let name = std::str::from_utf8(bytes)
                .map_err(|_| Error::CountMismatch("class name is not UTF-8".into()))?;
            names.push(name.to_string());
        }
        let classes = ClassMap::new(names.iter().map(String::as_str));
        if classes.names() != names.as_slice() {
            return Err(Error::CountMismatch("class names not sorted and unique".into()));
        }
        Ok(classes)
    }

    fn net(&mut self) -> Result<DenseNet> {
        let n = self.u32()?;
        let n = self.expect_room(n as u64, 17, "layer descriptors")?;
        let mut shapes = Vec::with_capacity(n);
        let mut declared_total: u64 = 0;
        for _ in 0..n {
            let inputs = self.u32()?;
            let outputs = self.u32()?;
            let code = self.u8()?;
            let activation = Activation::from_code(code)
                .ok_or_else(|| Error::CountMismatch(format!("unknown activation code {code}")))?;
            let dropout = self.f64()?;
            declared_total += inputs as u64 * outputs as u64 + outputs as u64;
            shapes.push((inputs, outputs, activation, dropout));
        }
        let stored = self.u64()?;
        if stored != declared_total {
            return Err(Error::CountMismatch(format!(
                "layers declare {declared_total} parameters, header says {stored}"
            )));
        }
        self.expect_room(stored, 4, "parameters")?;
        let mut layers = Vec::with_capacity(n);
        for (inputs, outputs, activation, dropout) in shapes {
            let weights = (0..inputs * outputs).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
            let biases = (0..outputs).map(|_| self.f32()).collect::<Result<Vec<_>>>()?;
            let weights = Matrix::from_vec(outputs, inputs, weights)?;
            layers.push(DenseLayer::new(weights, biases, activation, dropout)?);
        }
        DenseNet::new(layers)
    }

    fn adam(&mut self) -> Result<AdamState> {
        let config = AdamConfig {
            lr: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            epsilon: self.f64()?,
        };
        let t = self.u64()?;
        let n = self.u32()?;
        let n = self.expect_room(n as u64, 8, "optimizer tensors")?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            let len = self.u64()?;
            let len = self.expect_room(len, 16, "optimizer moments")?;
            m.push((0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?);
            v.push((0..len).map(|_| self.f64()).collect::<Result<Vec<_>>>()?);
        }
        Ok(AdamState { config, t, m, v })
    }

    fn tree(&mut self, n_classes: usize, depth: usize) -> Result<TreeNode> {
        if depth > MAX_TREE_DEPTH {
            return Err(Error::CountMismatch("tree deeper than supported".into()));
        }
        match self.u8()? {
            0 => {
                let label = self.u32()?;
                let class_counts = (0..n_classes)
                    .map(|_| self.u32().map(|c| c as u32))
                    .collect::<Result<Vec<_>>>()?;
                Ok(TreeNode::Leaf { label, class_counts })
            }
            1 => {
                let feature = self.u16()? as usize;
                let threshold = self.f64()?;
                let left = Box::new(self.tree(n_classes, depth + 1)?);
                let right = Box::new(self.tree(n_classes, depth + 1)?);
                Ok(TreeNode::Internal {
                    feature,
                    threshold,
                    left,
                    right,
                })
            }
            tag => Err(Error::CountMismatch(format!("unknown tree node tag {tag}"))),
        }
    }
}

fn check_optimizer(state: &AdamState, net: &DenseNet, what: &str) -> Result<()> {
    let expected: Vec<usize> = net.params().iter().map(|p| p.len()).collect();
    if state.shapes() != expected {
        return Err(Error::CountMismatch(format!("{what} optimizer does not match its network")));
    }
    Ok(())
}

/// Parse and verify a model file image.
pub fn from_bytes(bytes: &[u8]) -> Result<SavedModel> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN + HASH_LEN {
        return Err(Error::HashMismatch);
    }
    let (payload, stored_hash) = bytes.split_at(bytes.len() - HASH_LEN);
    if Sha256::digest(payload).as_slice() != stored_hash {
        return Err(Error::HashMismatch);
    }
    let mut r = Reader { data: payload, pos: MAGIC.len() };
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let code = r.u8()?;
    let kind = ModelKind::from_code(code).ok_or_else(|| Error::CountMismatch(format!("unknown model kind {code}")))?;
    let classes = r.classes()?;
    let model = match kind {
        ModelKind::Classifier => SavedModel::Classifier(Classifier::new(r.net()?, classes)?),
        ModelKind::SganFull => {
            let trunk = r.net()?.with_mode(Mode::Training);
            let disc_head = r.net()?.with_mode(Mode::Training);
            let gen = r.net()?.with_mode(Mode::Training);
            let optimizers = SganOptimizers {
                disc: r.adam()?,
                class: r.adam()?,
                gen: r.adam()?,
            };
            if trunk.output_dim() != classes.len() || disc_head.input_dim() != classes.len() {
                return Err(Error::CountMismatch("network widths disagree with class count".into()));
            }
            let mut disc_params = trunk.params();
            disc_params.extend(disc_head.params());
            let disc_shapes: Vec<usize> = disc_params.iter().map(|p| p.len()).collect();
            if optimizers.disc.shapes() != disc_shapes {
                return Err(Error::CountMismatch("discriminator optimizer does not match its network".into()));
            }
            check_optimizer(&optimizers.class, &trunk, "classifier")?;
            check_optimizer(&optimizers.gen, &gen, "generator")?;
            SavedModel::SganFull(Box::new(SganCheckpoint {
                model: SganModel { trunk, disc_head, gen },
                optimizers,
                classes,
            }))
        }
        ModelKind::Knn => {
            let k = r.u32()?;
            let n = r.u32()?;
            let n = r.expect_room(n as u64, 4 + 4 * BINS as u64, "knn points")?;
            let labels = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let mut points = Vec::with_capacity(n);
            for _ in 0..n {
                let mut p = [0.0; BINS];
                for v in p.iter_mut() {
                    *v = r.f32()?;
                }
                points.push(p);
            }
            SavedModel::Knn(KnnModel::new(points, labels, k, classes)?)
        }
        ModelKind::Tree => {
            let root = r.tree(classes.len(), 0)?;
            SavedModel::Tree(DecisionTree::new(root, classes)?)
        }
    };
    if r.pos != payload.len() {
        return Err(Error::CountMismatch(format!(
            "{} trailing bytes after the model body",
            payload.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn save(model: &SavedModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SavedModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
