//! The toy detector: three stride-2 convs, optional attention blocks at the
//! deepest width, and a 1x1 head that emits one objectness logit, four box
//! offsets, and K class logits per grid cell.

use crate::autodiff::{NodeId, Tape};
use crate::blocks::{he_uniform, CafBlockHyper, CafBlockNodes, CafBlockParams};
use crate::conv::{Conv2dGeom, ConvSpec};
use crate::error::{CoreError, Result};
use crate::io::{Checkpoint, IoError, IoResult};
use crate::tensor::{Scalar, Tensor4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Input channel count the backbone expects (RGB scenes).
pub const IMG_CHANNELS: usize = 3;

/// Backbone widths; each stage halves the spatial extent.
pub const STEM_WIDTHS: [usize; 3] = [8, 16, 32];

/// Per-cell channels before the class logits: objectness + (dx, dy, lw, lh).
pub const BOX_FIELDS: usize = 5;

#[derive(Clone, Debug)]
pub struct ToyDetectorParams<T> {
    pub stem: Vec<ConvSpec<T>>,
    pub blocks: Vec<CafBlockParams<T>>,
    pub head: ConvSpec<T>,
    classes: usize,
}

/// Tape nodes of a staged detector, plus the per-block hyperparameters the
/// forward pass needs.
pub struct DetectorNodes {
    pub stem: Vec<(NodeId, NodeId)>,
    pub blocks: Vec<(CafBlockNodes, CafBlockHyper)>,
    pub head: (NodeId, NodeId),
}

impl DetectorNodes {
    /// Node ids in flatten order, parallel to
    /// [`ToyDetectorParams::tensors_mut`].
    pub fn ordered(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        for &(w, b) in &self.stem {
            ids.push(w);
            ids.push(b);
        }
        for (block, _) in &self.blocks {
            ids.extend(block.to_vec());
        }
        ids.push(self.head.0);
        ids.push(self.head.1);
        ids
    }
}

fn strided3x3<T: Scalar>(out_ch: usize, in_ch: usize, rng: &mut impl Rng) -> ConvSpec<T> {
    ConvSpec {
        weights: he_uniform((out_ch, in_ch, 3, 3), in_ch * 9, rng),
        bias: Some(Tensor4::zeros((1, out_ch, 1, 1))),
        geom: Conv2dGeom {
            stride: (2, 2),
            padding: (1, 1),
            dilation: (1, 1),
            groups: 1,
        },
    }
}

impl<T: Scalar> ToyDetectorParams<T> {
    /// Fresh detector with `block_count` attention blocks at the deepest
    /// width; 0 is the plain-backbone ablation arm.
    pub fn init(classes: usize, block_count: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::init_full(classes, block_count, &STEM_WIDTHS, (2, 3), rng)
    }

    pub fn init_full(
        classes: usize,
        block_count: usize,
        widths: &[usize],
        dilations: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(CoreError::Config("detector needs at least one class".into()));
        }
        if widths.is_empty() || widths.contains(&0) {
            return Err(CoreError::Config(format!(
                "backbone widths {widths:?} must be positive"
            )));
        }
        let mut stem = Vec::with_capacity(widths.len());
        let mut in_ch = IMG_CHANNELS;
        for &w in widths {
            stem.push(strided3x3(w, in_ch, rng));
            in_ch = w;
        }
        let c = *widths.last().unwrap();
        let blocks = (0..block_count)
            .map(|_| CafBlockParams::init_with(c, 2 * c, dilations, rng))
            .collect::<Result<Vec<_>>>()?;
        let head = ConvSpec {
            weights: he_uniform((BOX_FIELDS + classes, c, 1, 1), c, rng),
            bias: Some(Tensor4::zeros((1, BOX_FIELDS + classes, 1, 1))),
            geom: Conv2dGeom::unit(1),
        };
        Ok(ToyDetectorParams {
            stem,
            blocks,
            head,
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn use_caf_block(&self) -> bool {
        !self.blocks.is_empty()
    }

    /// Spatial downscale factor between image and prediction grid.
    pub fn cell(&self) -> usize {
        1 << self.stem.len()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stem.iter().map(|s| s.out_ch()).collect()
    }

    /// Prediction grid for an image of the given extent, which must be a
    /// positive multiple of [`Self::cell`].
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let cell = self.cell();
        if h == 0 || w == 0 || h % cell != 0 || w % cell != 0 {
            return Err(CoreError::shape(
                "detector_forward",
                format!("image {h}x{w} is not a positive multiple of the {cell}px cell"),
            ));
        }
        Ok((h / cell, w / cell))
    }

    pub fn stage(&self, tape: &mut Tape<T>, trainable: bool) -> DetectorNodes {
        let push = |tape: &mut Tape<T>, t: &Tensor4<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };
        let stem = self
            .stem
            .iter()
            .map(|s| {
                let w = push(tape, &s.weights);
                let b = push(tape, s.bias.as_ref().expect("stem convs carry bias"));
                (w, b)
            })
            .collect();
        let blocks = self
            .blocks
            .iter()
            .map(|b| (b.stage(tape, trainable), CafBlockHyper::of(b)))
            .collect();
        let head_w = push(tape, &self.head.weights);
        let head_b = push(tape, self.head.bias.as_ref().expect("head carries bias"));
        DetectorNodes {
            stem,
            blocks,
            head: (head_w, head_b),
        }
    }

    /// Tensor names in flatten order; parallel to [`Self::tensors`] and
    /// [`Self::tensors_mut`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.stem.len() {
            names.push(format!("stem.{i}.w"));
            names.push(format!("stem.{i}.b"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            for (k, _) in b.tensors() {
                names.push(format!("block.{i}.{k}"));
            }
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut out: Vec<(String, &Tensor4<T>)> = Vec::new();
        for (i, s) in self.stem.iter().enumerate() {
            out.push((format!("stem.{i}.w"), &s.weights));
            out.push((format!("stem.{i}.b"), s.bias.as_ref().expect("stem bias")));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(
                b.tensors()
                    .into_iter()
                    .map(|(k, t)| (format!("block.{i}.{k}"), t)),
            );
        }
        out.push(("head.w".into(), &self.head.weights));
        out.push(("head.b".into(), self.head.bias.as_ref().expect("head bias")));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut out: Vec<&mut Tensor4<T>> = Vec::new();
        for s in &mut self.stem {
            out.push(&mut s.weights);
            out.push(s.bias.as_mut().expect("stem bias"));
        }
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.head.weights);
        out.push(self.head.bias.as_mut().expect("head bias"));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ToyDetectorParams<U> {
        let cast_spec = |s: &ConvSpec<T>| ConvSpec {
            weights: s.weights.cast(),
            bias: s.bias.as_ref().map(|b| b.cast()),
            geom: s.geom,
        };
        ToyDetectorParams {
            stem: self.stem.iter().map(cast_spec).collect(),
            blocks: self.blocks.iter().map(|b| b.cast()).collect(),
            head: cast_spec(&self.head),
            classes: self.classes,
        }
    }
}

fn parse_usize_list(s: &str) -> Option<Vec<usize>> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().ok())
        .collect()
}

impl<T: crate::io::Element> ToyDetectorParams<T> {
    /// Package the full model as a checkpoint. `extra` config pairs (seed,
    /// step counters, ...) are stored verbatim after the architecture keys.
    pub fn to_checkpoint(&self, extra: &[(String, String)]) -> IoResult<Checkpoint> {
        let dil = self
            .blocks
            .first()
            .map(|b| b.msnn.dilations())
            .unwrap_or((2, 3));
        let groups = self
            .blocks
            .first()
            .map(|b| b.acfm.shuffle_groups)
            .unwrap_or(1);
        let mut config = vec![
            ("classes".to_string(), self.classes.to_string()),
            ("blocks".to_string(), self.blocks.len().to_string()),
            (
                "widths".to_string(),
                self.widths()
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "dilations".to_string(),
                format!("{},{}", dil.0, dil.1),
            ),
            ("shuffle_groups".to_string(), groups.to_string()),
        ];
        config.extend(extra.iter().cloned());
        let mut ck = Checkpoint::new(config);
        for (name, t) in self.tensors() {
            ck.push_tensor(&name, t)?;
        }
        Ok(ck)
    }

    /// Rebuild a model from a checkpoint, verifying that every stored tensor
    /// matches the architecture the config describes.
    pub fn from_checkpoint(ck: &Checkpoint) -> IoResult<Self> {
        let get = |key: &str| {
            ck.config_value(key)
                .ok_or_else(|| IoError::Corrupt(format!("checkpoint config lacks '{key}'")))
        };
        let bad = |key: &str, val: &str| {
            IoError::Corrupt(format!("checkpoint config {key}='{val}' does not parse"))
        };
        let classes: usize = get("classes")?
            .parse()
            .map_err(|_| bad("classes", get("classes").unwrap()))?;
        let block_count: usize = get("blocks")?
            .parse()
            .map_err(|_| bad("blocks", get("blocks").unwrap()))?;
        let widths = parse_usize_list(get("widths")?)
            .ok_or_else(|| bad("widths", get("widths").unwrap()))?;
        let dil = parse_usize_list(get("dilations")?)
            .filter(|d| d.len() == 2)
            .ok_or_else(|| bad("dilations", get("dilations").unwrap()))?;
        let groups: usize = get("shuffle_groups")?
            .parse()
            .map_err(|_| bad("shuffle_groups", get("shuffle_groups").unwrap()))?;

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model =
            Self::init_full(classes, block_count, &widths, (dil[0], dil[1]), &mut rng)
                .map_err(|e| IoError::Corrupt(format!("checkpoint architecture: {e}")))?;
        for b in &mut model.blocks {
            if b.c() % groups != 0 {
                return Err(IoError::Corrupt(format!(
                    "shuffle_groups {groups} does not divide width {}",
                    b.c()
                )));
            }
            b.acfm.shuffle_groups = groups;
        }

        let names = model.tensor_names();
        if ck.len() != names.len() {
            return Err(IoError::Corrupt(format!(
                "checkpoint holds {} tensors, architecture needs {}",
                ck.len(),
                names.len()
            )));
        }
        for (name, slot) in names.iter().zip(model.tensors_mut()) {
            let stored: Tensor4<T> = ck.tensor(name)?;
            if stored.shape() != slot.shape() {
                return Err(IoError::ShapeMismatch(format!(
                    "tensor '{name}' is {:?}, architecture expects {:?}",
                    stored.shape(),
                    slot.shape()
                )));
            }
            *slot = stored;
        }
        Ok(model)
    }
}

/// Detector forward pass on the tape: ReLU after each backbone stage, then
/// the attention blocks, then the linear head.
pub fn detector_forward_t<T: Scalar>(
    tape: &mut Tape<T>,
    img: NodeId,
    nodes: &DetectorNodes,
) -> Result<NodeId> {
    let shape = tape.value(img).shape();
    let cell = 1usize << nodes.stem.len();
    if shape.2 == 0 || shape.3 == 0 || shape.2 % cell != 0 || shape.3 % cell != 0 {
        return Err(CoreError::shape(
            "detector_forward",
            format!(
                "image {}x{} is not a positive multiple of the {cell}px cell",
                shape.2, shape.3
            ),
        ));
    }
    let stride2 = Conv2dGeom {
        stride: (2, 2),
        padding: (1, 1),
        dilation: (1, 1),
        groups: 1,
    };
    let mut x = img;
    for &(w, b) in &nodes.stem {
        x = tape.conv2d(x, w, Some(b), stride2)?;
        x = tape.relu(x);
    }
    for (block, hyper) in &nodes.blocks {
        x = crate::blocks::caf_block_forward_t(tape, x, block, hyper)?;
    }
    tape.conv2d(x, nodes.head.0, Some(nodes.head.1), Conv2dGeom::unit(1))
}

/// Forward pass as a plain function.
pub fn detector_forward<T: Scalar>(
    img: &Tensor4<T>,
    p: &ToyDetectorParams<T>,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let x = tape.leaf(img.clone());
    let nodes = p.stage(&mut tape, false);
    let out = detector_forward_t(&mut tape, x, &nodes)?;
    Ok(tape.value(out).clone())
}
