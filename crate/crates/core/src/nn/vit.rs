//! Vision transformer whose missing image regions are removed by dropping
//! their tokens from the sequence.

use std::collections::BTreeMap;

use mlab_tensor::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::missingness::{Region, RegionPartition};
use crate::nn::layers::{self, gather_rows, param_fields};
use crate::seed;

/// Additive pre-softmax value for attention to dummy tokens.
pub const PAD_MASK_VALUE: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub token_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            token_size: 8,
            embed_dim: 64,
            num_heads: 4,
            num_layers: 4,
            mlp_ratio: 2,
            num_classes: 8,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.token_size == 0 || self.image_size == 0 || self.image_size % self.token_size != 0 {
            return bad(format!(
                "image size {} is not a multiple of token size {}",
                self.image_size, self.token_size
            ));
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embedding width {} is not divisible by {} heads",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_classes == 0 || self.mlp_ratio == 0 {
            return bad("classes and mlp ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid {
            image_size: self.image_size,
            token_size: self.token_size,
        }
    }

    pub fn patch_dim(&self) -> usize {
        Image::CHANNELS * self.token_size * self.token_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// How a batch of token sequences of different lengths is laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Every sequence holds exactly its kept tokens.
    Compact,
    /// Sequences are padded with dummy tokens to a common length and the
    /// dummies are masked out of attention.
    Padded,
}

/// Geometry of the square token grid over the image plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub image_size: usize,
    pub token_size: usize,
}

impl TokenGrid {
    pub fn side(&self) -> usize {
        self.image_size / self.token_size
    }

    pub fn tokens(&self) -> usize {
        self.side() * self.side()
    }

    pub fn token_at(&self, y: usize, x: usize) -> usize {
        (y / self.token_size) * self.side() + x / self.token_size
    }

    /// Every grid token whose footprint intersects one of the removed
    /// regions, ascending.
    pub fn covering_tokens(
        &self,
        partition: &RegionPartition,
        removed: &[usize],
    ) -> Result<Vec<usize>> {
        if partition.height() != self.image_size || partition.width() != self.image_size {
            return Err(Error::Dimension(format!(
                "partition over {}x{} for {}-pixel token grid",
                partition.height(),
                partition.width(),
                self.image_size
            )));
        }
        let mut hit = vec![false; self.tokens()];
        for &r in removed {
            let region = partition
                .regions()
                .get(r)
                .ok_or_else(|| Error::InvalidParam(format!("region {r} outside partition")))?;
            match region {
                Region::Rect { y0, x0, h, w } => {
                    if *h == 0 || *w == 0 {
                        continue;
                    }
                    let ts = self.token_size;
                    for ty in y0 / ts..=(y0 + h - 1) / ts {
                        for tx in x0 / ts..=(x0 + w - 1) / ts {
                            hit[ty * self.side() + tx] = true;
                        }
                    }
                }
                Region::Pixels(pixels) => {
                    for &p in pixels {
                        let p = p as usize;
                        hit[self.token_at(p / self.image_size, p % self.image_size)] = true;
                    }
                }
            }
        }
        Ok((0..hit.len()).filter(|&i| hit[i]).collect())
    }

    /// Complement of `dropped` (which must be sorted) in grid order.
    pub fn kept(&self, dropped: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.tokens());
        let mut d = dropped.iter().peekable();
        for i in 0..self.tokens() {
            if d.peek() == Some(&&i) {
                d.next();
            } else {
                out.push(i);
            }
        }
        out
    }
}

/// Embedded grid tokens (patch projection plus positional embedding) and
/// the grid indices they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T: Scalar = f32> {
    pub tokens: Tensor<T>,
    pub kept_indices: Vec<usize>,
}

impl<T: Scalar> TokenSet<T> {
    pub fn len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept_indices.is_empty()
    }

    /// Row `i` of the token matrix.
    pub fn token(&self, i: usize) -> &[T] {
        let d = self.tokens.shape()[1];
        &self.tokens.data()[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitStem<P> {
    pub patch_w: P,
    pub patch_b: P,
    pub pos: P,
    pub cls: P,
}
param_fields!(VitStem {
    patch_w,
    patch_b,
    pos,
    cls
});

#[derive(Debug, Clone, PartialEq)]
pub struct VitBlock<P> {
    pub ln1_g: P,
    pub ln1_b: P,
    pub qkv_w: P,
    pub qkv_b: P,
    pub proj_w: P,
    pub proj_b: P,
    pub ln2_g: P,
    pub ln2_b: P,
    pub fc1_w: P,
    pub fc1_b: P,
    pub fc2_w: P,
    pub fc2_b: P,
}
param_fields!(VitBlock {
    ln1_g,
    ln1_b,
    qkv_w,
    qkv_b,
    proj_w,
    proj_b,
    ln2_g,
    ln2_b,
    fc1_w,
    fc1_b,
    fc2_w,
    fc2_b
});

#[derive(Debug, Clone, PartialEq)]
pub struct VitHead<P> {
    pub norm_g: P,
    pub norm_b: P,
    pub head_w: P,
    pub head_b: P,
}
param_fields!(VitHead {
    norm_g,
    norm_b,
    head_w,
    head_b
});

#[derive(Debug, Clone, PartialEq)]
pub struct VitWeights<P> {
    pub stem: VitStem<P>,
    pub blocks: Vec<VitBlock<P>>,
    pub head: VitHead<P>,
}

impl<P> VitWeights<P> {
    pub(crate) fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> VitWeights<Q> {
        VitWeights {
            stem: self.stem.map("stem.", f),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}."), f))
                .collect(),
            head: self.head.map("head.", f),
        }
    }

    pub(crate) fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a P)) {
        self.stem.visit("stem.", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}."), f);
        }
        self.head.visit("head.", f);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut P)) {
        self.stem.visit_mut("stem.", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}."), f);
        }
        self.head.visit_mut("head.", f);
    }
}

/// Segments of equal length processed by one batched attention product.
struct SegmentGroup {
    starts: Vec<usize>,
    len: usize,
    /// Per segment, which key positions are real tokens (padded mode only).
    valid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VitModel<T: Scalar = f32> {
    config: VitConfig,
    pub weights: VitWeights<Tensor<T>>,
}

impl<T: Scalar> VitModel<T> {
    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed);
        let d = config.embed_dim;
        let hidden = d * config.mlp_ratio;
        let g = config.grid().tokens();
        let stem = VitStem {
            patch_w: layers::dense(&mut rng, config.patch_dim(), d),
            patch_b: Tensor::zeros(&[d]),
            pos: layers::normal(&mut rng, &[g, d], 0.02),
            cls: layers::normal(&mut rng, &[1, d], 0.02),
        };
        let blocks = (0..config.num_layers)
            .map(|_| VitBlock {
                ln1_g: Tensor::ones(&[d]),
                ln1_b: Tensor::zeros(&[d]),
                qkv_w: layers::dense(&mut rng, d, 3 * d),
                qkv_b: Tensor::zeros(&[3 * d]),
                proj_w: layers::dense(&mut rng, d, d),
                proj_b: Tensor::zeros(&[d]),
                ln2_g: Tensor::ones(&[d]),
                ln2_b: Tensor::zeros(&[d]),
                fc1_w: layers::dense(&mut rng, d, hidden),
                fc1_b: Tensor::zeros(&[hidden]),
                fc2_w: layers::dense(&mut rng, hidden, d),
                fc2_b: Tensor::zeros(&[d]),
            })
            .collect();
        let head = VitHead {
            norm_g: Tensor::ones(&[d]),
            norm_b: Tensor::zeros(&[d]),
            head_w: layers::dense(&mut rng, d, config.num_classes),
            head_b: Tensor::zeros(&[config.num_classes]),
        };
        Ok(Self {
            config,
            weights: VitWeights { stem, blocks, head },
        })
    }

    pub fn from_weights(config: VitConfig, weights: VitWeights<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), 0)?;
        let mut expected = Vec::new();
        reference
            .weights
            .visit(&mut |name, t| expected.push((name, t.shape().to_vec())));
        let mut got = Vec::new();
        weights.visit(&mut |name, t| got.push((name, t.shape().to_vec())));
        if expected != got {
            return Err(Error::Config(
                "weights do not match the transformer configuration".into(),
            ));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn grid(&self) -> TokenGrid {
        self.config.grid()
    }

    pub fn cast<U: Scalar>(&self) -> VitModel<U> {
        VitModel {
            config: self.config.clone(),
            weights: self.weights.map(&mut |_, t| t.cast()),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> VitWeights<Var> {
        self.weights.map(&mut |_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Patch embeddings plus positions for `[B, 3, H, W]` images, as
    /// `[B * grid_tokens, D]` rows.
    pub fn embed(&self, tape: &mut Tape<T>, w: &VitWeights<Var>, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let s = self.config.image_size;
        if shape.len() != 4 || shape[1] != Image::CHANNELS || shape[2] != s || shape[3] != s {
            return Err(Error::Dimension(format!(
                "transformer expects [B, 3, {s}, {s}] input, got {shape:?}"
            )));
        }
        let batch = shape[0];
        let grid = self.grid();
        let (ts, side, g) = (self.config.token_size, grid.side(), grid.tokens());
        let pd = self.config.patch_dim();
        let d = self.config.embed_dim;
        let plane = s * s;
        let mut index = Vec::with_capacity(batch * g * pd);
        for b in 0..batch {
            for t in 0..g {
                let (ty, tx) = (t / side, t % side);
                for c in 0..Image::CHANNELS {
                    for py in 0..ts {
                        let row = b * 3 * plane + c * plane + (ty * ts + py) * s + tx * ts;
                        index.extend(row..row + ts);
                    }
                }
            }
        }
        let patches = tape.gather(images, &[batch * g, pd], index.into())?;
        let projected = layers::linear(tape, patches, w.stem.patch_w, w.stem.patch_b)?;
        let pos_index: Vec<usize> = (0..batch).flat_map(|_| 0..g * d).collect();
        let pos = tape.gather(w.stem.pos, &[batch * g, d], pos_index.into())?;
        Ok(tape.add(projected, pos)?)
    }

    /// Runs the encoder on selected token rows. `sequences[i]` lists the
    /// rows of `rows` that form image `i`'s tokens; returns `[B, classes]`.
    pub fn encode(
        &self,
        tape: &mut Tape<T>,
        w: &VitWeights<Var>,
        rows: Var,
        sequences: &[Vec<usize>],
        mode: MaskMode,
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let n_rows = tape.shape(rows)[0];
        let zero = tape.constant(Tensor::zeros(&[1, d]));
        let base = tape.concat(&[w.stem.cls, rows, zero])?;
        let dummy = 1 + n_rows;
        let mut order = Vec::new();
        let mut groups = Vec::new();
        match mode {
            MaskMode::Compact => {
                let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                for seq in sequences {
                    by_len.entry(seq.len() + 1).or_default().push(order.len());
                    order.push(0);
                    order.extend(seq.iter().map(|&r| 1 + r));
                }
                groups.extend(by_len.into_iter().map(|(len, starts)| SegmentGroup {
                    starts,
                    len,
                    valid: None,
                }));
            }
            MaskMode::Padded => {
                let len = 1 + sequences.iter().map(Vec::len).max().unwrap_or(0);
                let mut starts = Vec::new();
                let mut valid = Vec::new();
                for seq in sequences {
                    starts.push(order.len());
                    valid.push(seq.len() + 1);
                    order.push(0);
                    order.extend(seq.iter().map(|&r| 1 + r));
                    order.extend(std::iter::repeat(dummy).take(len - 1 - seq.len()));
                }
                groups.push(SegmentGroup {
                    starts,
                    len,
                    valid: Some(valid),
                });
            }
        }
        let cls_rows: Vec<usize> = {
            let mut starts: Vec<usize> = Vec::with_capacity(sequences.len());
            let mut at = 0;
            for seq in sequences {
                starts.push(at);
                at += match mode {
                    MaskMode::Compact => seq.len() + 1,
                    MaskMode::Padded => groups[0].len,
                };
            }
            starts
        };
        let mut x = gather_rows(tape, base, &order, d)?;
        for block in &w.blocks {
            let h = layers::layernorm(tape, x, block.ln1_g, block.ln1_b)?;
            let qkv = layers::linear(tape, h, block.qkv_w, block.qkv_b)?;
            let att = self.attention(tape, qkv, order.len(), &groups)?;
            let att = layers::linear(tape, att, block.proj_w, block.proj_b)?;
            x = tape.add(x, att)?;
            let h = layers::layernorm(tape, x, block.ln2_g, block.ln2_b)?;
            let m = layers::linear(tape, h, block.fc1_w, block.fc1_b)?;
            let m = tape.gelu(m)?;
            let m = layers::linear(tape, m, block.fc2_w, block.fc2_b)?;
            x = tape.add(x, m)?;
        }
        let cls = gather_rows(tape, x, &cls_rows, d)?;
        let cls = layers::layernorm(tape, cls, w.head.norm_g, w.head.norm_b)?;
        layers::linear(tape, cls, w.head.head_w, w.head.head_b)
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        qkv: Var,
        total_rows: usize,
        groups: &[SegmentGroup],
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let heads = self.config.num_heads;
        let dh = self.config.head_dim();
        let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
        let mut outputs = Vec::with_capacity(groups.len());
        let mut back = vec![0usize; total_rows * d];
        let mut offset = 0;
        for group in groups {
            let (segs, n) = (group.starts.len(), group.len);
            let shape = [segs * heads, n, dh];
            let mut q_index = Vec::with_capacity(segs * heads * n * dh);
            for &start in &group.starts {
                for h in 0..heads {
                    for i in 0..n {
                        let row = (start + i) * 3 * d + h * dh;
                        q_index.extend(row..row + dh);
                    }
                }
            }
            let k_index: Vec<usize> = q_index.iter().map(|&i| i + d).collect();
            let v_index: Vec<usize> = q_index.iter().map(|&i| i + 2 * d).collect();
            let q = tape.gather(qkv, &shape, q_index.into())?;
            let k = tape.gather(qkv, &shape, k_index.into())?;
            let v = tape.gather(qkv, &shape, v_index.into())?;
            let scores = tape.bmm(q, k, true)?;
            let mut scores = tape.scale(scores, scale)?;
            if let Some(valid) = &group.valid {
                let masked = T::from_f64_lossy(PAD_MASK_VALUE);
                let mut mask = Vec::with_capacity(segs * heads * n * n);
                for &real in valid {
                    let row: Vec<T> = (0..n)
                        .map(|j| if j < real { T::zero() } else { masked })
                        .collect();
                    for _ in 0..heads * n {
                        mask.extend_from_slice(&row);
                    }
                }
                let mask = tape.constant(Tensor::from_vec(&[segs * heads, n, n], mask)?);
                scores = tape.add(scores, mask)?;
            }
            let probs = tape.softmax(scores, 2)?;
            let out = tape.bmm(probs, v, false)?;
            for (s, &start) in group.starts.iter().enumerate() {
                for h in 0..heads {
                    for i in 0..n {
                        let src = offset + ((s * heads + h) * n + i) * dh;
                        let dst = (start + i) * d + h * dh;
                        for c in 0..dh {
                            back[dst + c] = src + c;
                        }
                    }
                }
            }
            offset += segs * heads * n * dh;
            let flat = tape.reshape(out, &[segs * heads * n * dh])?;
            outputs.push(flat);
        }
        let all = if outputs.len() == 1 {
            outputs[0]
        } else {
            tape.concat(&outputs)?
        };
        Ok(tape.gather(all, &[total_rows, d], back.into())?)
    }

    /// Logits `[B, classes]` for `[B, 3, H, W]` images with the listed grid
    /// tokens kept per image.
    pub fn forward_images(
        &self,
        tape: &mut Tape<T>,
        w: &VitWeights<Var>,
        images: Var,
        kept: &[Vec<usize>],
        mode: MaskMode,
    ) -> Result<Var> {
        let g = self.grid().tokens();
        let batch = tape.shape(images)[0];
        if kept.len() != batch {
            return Err(Error::Dimension(format!(
                "{} token lists for {batch} images",
                kept.len()
            )));
        }
        let embedded = self.embed(tape, w, images)?;
        let sequences: Vec<Vec<usize>> = kept
            .iter()
            .enumerate()
            .map(|(b, k)| k.iter().map(|&t| b * g + t).collect())
            .collect();
        self.encode(tape, w, embedded, &sequences, mode)
    }

    pub fn tokenize(&self, image: &Image) -> Result<TokenSet<T>> {
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let batch = Image::batch_tensor::<T>(&[image])?;
        let images = tape.constant(batch);
        let rows = self.embed(&mut tape, &w, images)?;
        Ok(TokenSet {
            tokens: tape.take(rows),
            kept_indices: (0..self.grid().tokens()).collect(),
        })
    }

    /// Removes every token whose footprint touches a removed region. The
    /// remaining tokens keep their embeddings, positions included.
    pub fn drop_tokens(
        &self,
        tokens: &TokenSet<T>,
        partition: &RegionPartition,
        removed: &[usize],
    ) -> Result<TokenSet<T>> {
        let dropped = self.grid().covering_tokens(partition, removed)?;
        let d = self.config.embed_dim;
        let mut data = Vec::new();
        let mut kept = Vec::new();
        for (i, &t) in tokens.kept_indices.iter().enumerate() {
            if dropped.binary_search(&t).is_err() {
                kept.push(t);
                data.extend_from_slice(tokens.token(i));
            }
        }
        Ok(TokenSet {
            tokens: Tensor::from_vec(&[kept.len(), d], data)?,
            kept_indices: kept,
        })
    }

    pub fn forward(&self, tokens: &TokenSet<T>, mode: MaskMode) -> Result<Tensor<T>> {
        Ok(self
            .forward_batch(std::slice::from_ref(tokens), mode)?
            .remove(0))
    }

    pub fn forward_batch(&self, sets: &[TokenSet<T>], mode: MaskMode) -> Result<Vec<Tensor<T>>> {
        let d = self.config.embed_dim;
        let mut data = Vec::new();
        let mut sequences = Vec::with_capacity(sets.len());
        let mut at = 0;
        for set in sets {
            if set.tokens.shape() != [set.len(), d] {
                return Err(Error::Dimension(format!(
                    "token matrix {:?} for {} tokens of width {d}",
                    set.tokens.shape(),
                    set.len()
                )));
            }
            data.extend_from_slice(set.tokens.data());
            sequences.push((at..at + set.len()).collect());
            at += set.len();
        }
        let mut tape = Tape::new();
        let w = self.bind(&mut tape, false);
        let rows = tape.constant(Tensor::from_vec(&[at, d], data)?);
        let logits = self.encode(&mut tape, &w, rows, &sequences, mode)?;
        let c = self.config.num_classes;
        let out = tape.take(logits);
        out.data()
            .chunks(c)
            .map(|row| Ok(Tensor::from_vec(&[c], row.to_vec())?))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> VitConfig {
        VitConfig {
            image_size: 16,
            token_size: 4,
            embed_dim: 16,
            num_heads: 2,
            num_layers: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn noise(seed: u64, size: usize) -> Image {
        let mut rng = seed::rng(seed);
        Image::new(
            size,
            size,
            (0..3 * size * size).map(|_| rng.gen()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = VitConfig::default();
        assert!(c.validate().is_ok());
        c.token_size = 7;
        assert!(c.validate().is_err());
        let mut c = VitConfig::default();
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_grid_has_64_tokens() {
        let model = VitModel::<f32>::init(VitConfig::default(), 1).unwrap();
        let tokens = model.tokenize(&noise(1, 64)).unwrap();
        assert_eq!(tokens.len(), 64);
        assert_eq!(tokens.kept_indices, (0..64).collect::<Vec<_>>());
        assert_eq!(model.weights.stem.pos.shape(), &[64, 64]);
    }

    #[test]
    fn tokenization_is_local() {
        let model = VitModel::<f32>::init(small(), 2).unwrap();
        let a = noise(3, 16);
        let mut b = a.clone();
        // Grid cell 5 is row 1, column 1 of the 4x4 grid.
        for c in 0..3 {
            for y in 4..8 {
                for x in 4..8 {
                    b.set(c, y, x, 1.0 - a.get(c, y, x));
                }
            }
        }
        let (ta, tb) = (model.tokenize(&a).unwrap(), model.tokenize(&b).unwrap());
        for i in 0..16 {
            assert_eq!(ta.token(i) == tb.token(i), i != 5, "token {i}");
        }
    }

    #[test]
    fn zero_image_tokens_are_bias_plus_position() {
        let mut model = VitModel::<f64>::init(small(), 4).unwrap();
        model.weights.stem.patch_b =
            Tensor::from_vec(&[16], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let tokens = model.tokenize(&Image::filled(16, 16, [0.0; 3])).unwrap();
        for i in 0..16 {
            let pos = &model.weights.stem.pos.data()[i * 16..(i + 1) * 16];
            for j in 0..16 {
                let expected = pos[j] + model.weights.stem.patch_b.data()[j];
                assert!((tokens.token(i)[j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conservative_cover() {
        let grid = VitConfig::default().grid();
        let p = RegionPartition::grid(64, 64, 10, 10).unwrap();
        // Region 0 is rows 0-9, cols 0-9.
        assert_eq!(grid.covering_tokens(&p, &[0]).unwrap(), vec![0, 1, 8, 9]);
        let cells = RegionPartition::grid(64, 64, 8, 8).unwrap();
        assert_eq!(grid.covering_tokens(&cells, &[13]).unwrap(), vec![13]);
        assert!(grid.covering_tokens(&cells, &[]).unwrap().is_empty());
        assert_eq!(grid.kept(&[0, 2]).len(), 62);
    }

    #[test]
    fn drop_tokens_keeps_embeddings() {
        let model = VitModel::<f32>::init(small(), 5).unwrap();
        let tokens = model.tokenize(&noise(6, 16)).unwrap();
        let p = RegionPartition::grid(16, 16, 4, 4).unwrap();
        assert_eq!(model.drop_tokens(&tokens, &p, &[]).unwrap(), tokens);
        let dropped = model.drop_tokens(&tokens, &p, &[2, 7]).unwrap();
        assert_eq!(dropped.len(), 14);
        assert!(!dropped.kept_indices.contains(&2) && !dropped.kept_indices.contains(&7));
        for (i, &t) in dropped.kept_indices.iter().enumerate() {
            assert_eq!(dropped.token(i), tokens.token(t));
        }
    }

    #[test]
    fn padded_matches_compact_on_ragged_batch() {
        let model = VitModel::<f32>::init(small(), 7).unwrap();
        let p = RegionPartition::grid(16, 16, 4, 4).unwrap();
        let full = model.tokenize(&noise(8, 16)).unwrap();
        let partial = model
            .drop_tokens(
                &model.tokenize(&noise(9, 16)).unwrap(),
                &p,
                &[0, 3, 4, 9, 10, 15],
            )
            .unwrap();
        let empty = model
            .drop_tokens(&full, &p, &(0..16).collect::<Vec<_>>())
            .unwrap();
        let sets = [full.clone(), partial.clone(), empty.clone()];
        let padded = model.forward_batch(&sets, MaskMode::Padded).unwrap();
        for (set, logits) in sets.iter().zip(&padded) {
            let alone = model.forward(set, MaskMode::Compact).unwrap();
            for (a, b) in alone.data().iter().zip(logits.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fully_dropped_input_ignores_image() {
        let model = VitModel::<f32>::init(small(), 10).unwrap();
        let p = RegionPartition::grid(16, 16, 4, 4).unwrap();
        let all: Vec<usize> = (0..16).collect();
        let a = model
            .drop_tokens(&model.tokenize(&noise(11, 16)).unwrap(), &p, &all)
            .unwrap();
        let b = model
            .drop_tokens(&model.tokenize(&noise(12, 16)).unwrap(), &p, &all)
            .unwrap();
        assert_eq!(
            model.forward(&a, MaskMode::Compact).unwrap(),
            model.forward(&b, MaskMode::Compact).unwrap()
        );
    }
}
