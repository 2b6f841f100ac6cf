//! Slice-wise inference, ensemble averaging and 3D post-processing.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::clahe;
use crate::error::{Error, Result};
use crate::network::{stack_batch, Checkpoint, Feat, NetworkConfig, ParameterSet, UNet};
use crate::preprocess::{crop_back, normalize_in_place, pad_to_multiple_of_32, Plane, Slice2D};
use crate::volume::{Ablation, LabelVolume, Volume, Volume3D};

/// Per-voxel foreground probability in [0, 1].
pub type ProbabilityVolume = Volume<f32>;

/// Slices forwarded together at inference.
const INFER_BATCH: usize = 8;

/// Optional contrast preprocessing applied before normalization, both in
/// training and at inference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheOptions {
    pub tiles: [usize; 2],
    pub clip_limit: f64,
}

impl Default for ClaheOptions {
    fn default() -> Self {
        ClaheOptions {
            tiles: [8, 8],
            clip_limit: 2.0,
        }
    }
}

/// Prepares one raw slice for the network: optional CLAHE, then per-slice
/// zero-mean unit-variance normalization.
pub fn prepare_slice(s: &Slice2D, clahe_opts: Option<&ClaheOptions>) -> Result<Slice2D> {
    let mut out = match clahe_opts {
        Some(c) => clahe(s, (c.tiles[0], c.tiles[1]), c.clip_limit)?,
        None => s.clone(),
    };
    normalize_in_place(&mut out.pixels);
    Ok(out)
}

/// A trained network ready for inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: UNet,
    pub params: ParameterSet<f32>,
    pub clahe: Option<ClaheOptions>,
}

impl Model {
    pub fn new(params: ParameterSet<f32>, clahe: Option<ClaheOptions>) -> Result<Self> {
        let net = UNet::new(&params.config)?;
        net.check(&params)?;
        Ok(Model { net, params, clahe })
    }

    /// Reads the preprocessing options recorded in the checkpoint metadata.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let clahe = match ck.meta.get("clahe") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                serde_json::from_value(v.clone())
                    .map_err(|e| Error::Checkpoint(format!("bad clahe metadata: {e}")))?,
            ),
        };
        Model::new(ck.params, clahe)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_checkpoint(Checkpoint::load(path)?)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.params.config
    }
}

/// Probability map plus the case-level ablation probability.
#[derive(Debug, Clone)]
pub struct CasePrediction {
    pub probability: ProbabilityVolume,
    /// Mean over slices (and models) of the per-slice sigmoid.
    pub ablation_probability: f64,
}

impl CasePrediction {
    /// POST iff the probability is strictly above one half.
    pub fn ablation(&self) -> Ablation {
        ablation_from_probability(self.ablation_probability)
    }
}

pub fn ablation_from_probability(p: f64) -> Ablation {
    if p > 0.5 {
        Ablation::Post
    } else {
        Ablation::Pre
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Runs every model over every axial slice. Probabilities are averaged in
/// f64 across models before being stored, so an ensemble of identical
/// models reproduces the single-model output exactly.
pub fn predict_case(models: &[Model], vol: &Volume3D) -> Result<CasePrediction> {
    if models.is_empty() {
        return Err(Error::Config("prediction needs at least one model".into()));
    }
    vol.validate()?;
    let [nx, ny, nz] = vol.dims();
    let plane = nx * ny;
    let mut prob_sum = vec![0f64; vol.len()];
    let mut cls_sum = vec![0f64; nz];
    for model in models {
        let mut prepared = Vec::with_capacity(nz);
        for z in 0..nz {
            let raw = Slice2D::from_pixels(ny, nx, vol.slice_z(z).to_vec())?;
            prepared.push(pad_to_multiple_of_32(&prepare_slice(&raw, model.clahe.as_ref())?)?);
        }
        for (chunk_idx, chunk) in prepared.chunks(INFER_BATCH).enumerate() {
            let (h, w) = (chunk[0].height, chunk[0].width);
            let images: Vec<&[f32]> = chunk.iter().map(|s| s.pixels.as_slice()).collect();
            let x: Feat<f32> = stack_batch(&images, h, w)?;
            let out = model.net.predict(&model.params, &x)?;
            for (i, s) in chunk.iter().enumerate() {
                let z = chunk_idx * INFER_BATCH + i;
                let fg = Plane::new(h, w, out.foreground_probability(i))?;
                let fg = crop_back(&fg, s.pad)?;
                for (acc, &p) in prob_sum[z * plane..(z + 1) * plane].iter_mut().zip(&fg.data) {
                    *acc += p as f64;
                }
                // rounded to f32 so the model sum below is exact
                cls_sum[z] += sigmoid(out.class_logits[i] as f64) as f32 as f64;
            }
        }
    }
    let m = models.len() as f64;
    let voxels = prob_sum.iter().map(|&s| (s / m).clamp(0.0, 1.0) as f32).collect();
    Ok(CasePrediction {
        probability: Volume::new(vol.dims(), vol.spacing(), voxels)?,
        ablation_probability: cls_sum.iter().map(|s| s / m).sum::<f64>() / nz as f64,
    })
}

/// Foreground probability volume, averaged over the ensemble.
pub fn predict_volume(models: &[Model], vol: &Volume3D) -> Result<ProbabilityVolume> {
    Ok(predict_case(models, vol)?.probability)
}

/// Case-level ablation probability and label.
pub fn classify_case(models: &[Model], vol: &Volume3D) -> Result<(f64, Ablation)> {
    let p = predict_case(models, vol)?.ablation_probability;
    Ok((p, ablation_from_probability(p)))
}

/// Mean of per-slice sigmoids; the label follows the same strict > 0.5 rule.
pub fn classify_from_logits(logits: &[f64]) -> (f64, Ablation) {
    let p = logits.iter().map(|&z| sigmoid(z)).sum::<f64>() / logits.len().max(1) as f64;
    (p, ablation_from_probability(p))
}

/// Foreground iff p > 0.5; exactly 0.5 is background.
pub fn threshold_argmax(p: &ProbabilityVolume) -> LabelVolume {
    let voxels = p.voxels().iter().map(|&v| u8::from(v > 0.5)).collect();
    Volume::new(p.dims(), p.spacing(), voxels).expect("geometry taken from a valid volume")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructuringElement {
    /// Centre plus the six face neighbours.
    Cross6,
    /// Full 3x3x3 cube.
    Cube26,
}

impl StructuringElement {
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let mut out = Vec::new();
        for dz in -1..=1isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let taxi = dx.abs() + dy.abs() + dz.abs();
                    if self == StructuringElement::Cube26 || taxi <= 1 {
                        out.push([dx, dy, dz]);
                    }
                }
            }
        }
        out
    }

    pub fn from_connectivity(c: usize) -> Result<Self> {
        match c {
            6 => Ok(StructuringElement::Cross6),
            26 => Ok(StructuringElement::Cube26),
            _ => Err(Error::Config(format!("connectivity must be 6 or 26, got {c}"))),
        }
    }
}

fn neighbour(dims: [usize; 3], v: [usize; 3], o: [isize; 3]) -> Option<usize> {
    let mut p = [0usize; 3];
    for a in 0..3 {
        let q = v[a] as isize + o[a];
        if q < 0 || q >= dims[a] as isize {
            return None;
        }
        p[a] = q as usize;
    }
    Some((p[2] * dims[1] + p[1]) * dims[0] + p[0])
}

fn morph(m: &LabelVolume, se: StructuringElement, dilate: bool) -> LabelVolume {
    let dims = m.dims();
    let offs = se.offsets();
    let src = m.voxels();
    let mut out = vec![0u8; src.len()];
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let ns = offs.iter().filter_map(|&o| neighbour(dims, [x, y, z], o));
                out[i] = if dilate {
                    u8::from(ns.into_iter().any(|j| src[j] == 1))
                } else {
                    // out-of-bounds neighbours do not erode
                    u8::from(ns.into_iter().all(|j| src[j] == 1))
                };
                i += 1;
            }
        }
    }
    Volume::new(dims, m.spacing(), out).expect("same geometry")
}

pub fn dilate(m: &LabelVolume, se: StructuringElement) -> LabelVolume {
    morph(m, se, true)
}

/// Erosion that ignores neighbours outside the volume.
pub fn erode(m: &LabelVolume, se: StructuringElement) -> LabelVolume {
    morph(m, se, false)
}

/// `iterations` dilations followed by as many erosions.
pub fn morphological_close(m: &LabelVolume, se: StructuringElement, iterations: usize) -> LabelVolume {
    let mut out = m.clone();
    for _ in 0..iterations {
        out = dilate(&out, se);
    }
    for _ in 0..iterations {
        out = erode(&out, se);
    }
    out
}

/// Component id per voxel (0 = background, ids from 1 in order of each
/// component's first voxel) and the size of every component.
pub fn label_components(m: &LabelVolume, connectivity: StructuringElement) -> (Vec<u32>, Vec<usize>) {
    let dims = m.dims();
    let src = m.voxels();
    let offs: Vec<[isize; 3]> = connectivity.offsets().into_iter().filter(|o| *o != [0, 0, 0]).collect();
    let mut labels = vec![0u32; src.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..src.len() {
        if src[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let v = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            for &o in &offs {
                if let Some(j) = neighbour(dims, v, o) {
                    if src[j] == 1 && labels[j] == 0 {
                        labels[j] = id;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest component. Equal sizes go to the component whose
/// first voxel has the smallest linear index.
pub fn largest_connected_component(m: &LabelVolume, connectivity: StructuringElement) -> LabelVolume {
    let (labels, sizes) = label_components(m, connectivity);
    let mut best = 0;
    for (k, &s) in sizes.iter().enumerate() {
        if s > sizes[best] {
            best = k;
        }
    }
    let keep = best as u32 + 1;
    let voxels = labels
        .iter()
        .map(|&l| u8::from(!sizes.is_empty() && l == keep))
        .collect();
    Volume::new(m.dims(), m.spacing(), voxels).expect("same geometry")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub structuring_element: StructuringElement,
    pub iterations: usize,
    /// 6 or 26.
    pub connectivity: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            structuring_element: StructuringElement::Cross6,
            iterations: 1,
            connectivity: 6,
        }
    }
}

/// Threshold, closing, then largest connected component.
pub fn postprocess(p: &ProbabilityVolume, cfg: &PostprocessConfig) -> Result<LabelVolume> {
    let conn = StructuringElement::from_connectivity(cfg.connectivity)?;
    let closed = morphological_close(&threshold_argmax(p), cfg.structuring_element, cfg.iterations);
    Ok(largest_connected_component(&closed, conn))
}
