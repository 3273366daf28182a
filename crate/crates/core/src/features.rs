//! Feature extraction: noise a clean video, run the frozen denoiser with
//! block capture, drop the conditioning token and pool per frame. Records
//! for a whole grid are persisted in a random-access cache file.
//!
//! Each frame is a single token, so per-frame pooling is the identity on
//! that token's hidden state.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

use crate::binio::{self, Reader, Writer};
use crate::diffusion::{forward_noise, ConditioningVector, CostLedger, Denoiser, DenoiserInput, NoiseSchedule, PassKind};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, tag};
use crate::worldgen::LatentVideo;

pub const CACHE_MAGIC: &[u8; 8] = b"NPFC0001";

/// Videos per batched forward pass during cache construction.
const EXTRACT_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    /// `F x D`.
    pub features: Array2<f64>,
    pub t: usize,
    pub layer: usize,
    pub video_id: u32,
    pub y_pc: bool,
    pub y_sem: bool,
    pub source_id: u16,
    pub quality_score: f64,
}

/// Noising seed for one (dataset, video, timestep) triple.
pub fn noise_seed(dataset_seed: u64, video_id: u32, t: usize) -> u64 {
    derive_seed(&[tag::NOISE, dataset_seed, video_id as u64, t as u64])
}

/// Drops the conditioning-token row and pools each frame's tokens.
pub fn pool_frames(hidden: &Array2<f64>, cond_tokens: usize) -> Array2<f64> {
    hidden.slice(s![cond_tokens.., ..]).to_owned()
}

fn record_from(video: &LatentVideo, video_id: u32, t: usize, layer: usize, hidden: &Array2<f64>) -> Result<FeatureRecord> {
    let features = pool_frames(hidden, 1).mapv(binio::quantize);
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("features of video {video_id} at t={t}, layer {layer}")));
    }
    Ok(FeatureRecord {
        features,
        t,
        layer,
        video_id,
        y_pc: video.y_pc,
        y_sem: video.y_sem,
        source_id: video.source_id,
        quality_score: video.quality_score,
    })
}

pub fn extract_features(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    video: &LatentVideo,
    video_id: u32,
    t: usize,
    layer: usize,
    noise_seed: u64,
    ledger: &mut CostLedger,
) -> Result<FeatureRecord> {
    let z = forward_noise(schedule, &video.frames, t, noise_seed)?;
    let cond = ConditioningVector::from_prompt(video.prompt_id);
    let out = model.forward(&z, t, &cond, &[layer], PassKind::Extract, ledger)?;
    record_from(video, video_id, t, layer, &out.captures[&layer])
}

/// Noised latent flattened row-major to length `F * P`.
pub fn latent_baseline_features(schedule: &NoiseSchedule, video: &LatentVideo, t: usize, noise_seed: u64) -> Result<Array1<f64>> {
    let z = forward_noise(schedule, &video.frames, t, noise_seed)?;
    Ok(Array1::from_iter(z.iter().copied()))
}

pub fn flatten_for_probe(record: &FeatureRecord) -> Array1<f64> {
    Array1::from_iter(record.features.iter().copied())
}

pub fn unflatten(v: &Array1<f64>, frames: usize, width: usize) -> Result<Array2<f64>> {
    Array2::from_shape_vec((frames, width), v.to_vec()).map_err(|e| Error::ShapeMismatch {
        expected: format!("{}", frames * width),
        actual: format!("{} ({e})", v.len()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub width: usize,
    pub frames: usize,
    /// `(t, layer)` coordinates covered by the cache.
    pub coords: Vec<(usize, usize)>,
    pub n_videos: usize,
    pub records: Vec<FeatureRecord>,
    index: BTreeMap<(u32, usize, usize), usize>,
}

impl FeatureCache {
    pub fn new(width: usize, frames: usize, coords: Vec<(usize, usize)>, n_videos: usize, records: Vec<FeatureRecord>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            if r.features.dim() != (frames, width) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{frames}x{width}"),
                    actual: format!("{:?}", r.features.dim()),
                });
            }
            if index.insert((r.video_id, r.t, r.layer), i).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate record (video {}, t {}, layer {})",
                    r.video_id, r.t, r.layer
                )));
            }
        }
        Ok(Self {
            width,
            frames,
            coords,
            n_videos,
            records,
            index,
        })
    }

    pub fn get(&self, video_id: u32, t: usize, layer: usize) -> Option<&FeatureRecord> {
        self.index.get(&(video_id, t, layer)).map(|&i| &self.records[i])
    }

    pub fn has_coord(&self, t: usize, layer: usize) -> bool {
        self.coords.contains(&(t, layer))
    }

    /// Records at one coordinate in video order.
    pub fn at(&self, t: usize, layer: usize) -> Result<Vec<&FeatureRecord>> {
        if !self.has_coord(t, layer) {
            return Err(Error::MissingCoordinate(format!("t={t}, layer={layer}")));
        }
        Ok(self
            .index
            .iter()
            .filter(|((_, rt, rl), _)| *rt == t && *rl == layer)
            .map(|(_, &i)| &self.records[i])
            .collect())
    }

    pub fn timesteps(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.coords.iter().map(|c| c.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.coords.iter().map(|c| c.1).collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// One record per (video, t, layer), with a single multi-layer capture pass
/// per (video, t).
pub fn build_cache(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    dataset: &[LatentVideo],
    dataset_seed: u64,
    timesteps: &[usize],
    layers: &[usize],
    ledger: &mut CostLedger,
) -> Result<FeatureCache> {
    for &t in timesteps {
        schedule.alpha_bar(t)?;
    }
    for &l in layers {
        if l >= model.shape.layers {
            return Err(Error::LayerOutOfRange {
                layer: l,
                depth: model.shape.layers,
            });
        }
    }
    let coords: Vec<(usize, usize)> = timesteps.iter().flat_map(|&t| layers.iter().map(move |&l| (t, l))).collect();
    let jobs: Vec<(usize, usize, &[LatentVideo])> = timesteps
        .iter()
        .flat_map(|&t| {
            dataset
                .chunks(EXTRACT_CHUNK)
                .enumerate()
                .map(move |(c, ch)| (t, c * EXTRACT_CHUNK, ch))
        })
        .collect();
    let results: Vec<Result<(Vec<FeatureRecord>, CostLedger)>> = jobs
        .par_iter()
        .map(|&(t, first, chunk)| {
            let mut local = CostLedger::default();
            let noised: Vec<Array2<f64>> = chunk
                .iter()
                .enumerate()
                .map(|(j, v)| forward_noise(schedule, &v.frames, t, noise_seed(dataset_seed, (first + j) as u32, t)))
                .collect::<Result<_>>()?;
            let conds: Vec<ConditioningVector> = chunk.iter().map(|v| ConditioningVector::from_prompt(v.prompt_id)).collect();
            let inputs: Vec<DenoiserInput> = noised.iter().zip(&conds).map(|(z, c)| DenoiserInput { z, t, cond: c }).collect();
            let outs = if layers.is_empty() {
                Vec::new()
            } else {
                model.forward_batch(&inputs, layers, PassKind::Extract, &mut local)?
            };
            let mut recs = Vec::with_capacity(chunk.len() * layers.len());
            for (j, (v, o)) in chunk.iter().zip(&outs).enumerate() {
                for &l in layers {
                    recs.push(record_from(v, (first + j) as u32, t, l, &o.captures[&l])?);
                }
            }
            Ok((recs, local))
        })
        .collect();
    let mut records = Vec::new();
    for r in results {
        let (recs, local) = r?;
        ledger.merge(&local);
        records.extend(recs);
    }
    FeatureCache::new(model.shape.width, model.shape.frames, coords, dataset.len(), records)
}

fn write_record(w: &mut Writer, r: &FeatureRecord) {
    w.u32(r.video_id);
    w.u32(r.t as u32);
    w.u32(r.layer as u32);
    w.u8(r.y_pc as u8);
    w.u8(r.y_sem as u8);
    w.u16(r.source_id);
    w.f32(r.quality_score as f32);
    w.f32s(r.features.iter().copied());
}

fn read_record(r: &mut Reader, frames: usize, width: usize) -> Result<FeatureRecord> {
    let video_id = r.u32()?;
    let t = r.u32()? as usize;
    let layer = r.u32()? as usize;
    let y_pc = r.u8()? != 0;
    let y_sem = r.u8()? != 0;
    let source_id = r.u16()?;
    let quality_score = r.f32()? as f64;
    let features = Array2::from_shape_vec((frames, width), r.f32s(frames * width)?).map_err(|e| r.err(e.to_string()))?;
    Ok(FeatureRecord {
        features,
        t,
        layer,
        video_id,
        y_pc,
        y_sem,
        source_id,
        quality_score,
    })
}

/// Layout: magic, `D`, `F`, coordinate list, `n_videos`, `n_records`,
/// records, index of `(video, t, layer, offset)`, index offset, CRC32.
pub fn encode_cache(cache: &FeatureCache) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CACHE_MAGIC);
    w.u32(cache.width as u32);
    w.u32(cache.frames as u32);
    w.u32(cache.coords.len() as u32);
    for &(t, l) in &cache.coords {
        w.u32(t as u32);
        w.u32(l as u32);
    }
    w.u32(cache.n_videos as u32);
    w.u32(cache.records.len() as u32);
    let mut offsets = Vec::with_capacity(cache.records.len());
    for r in &cache.records {
        offsets.push(w.len() as u64);
        write_record(&mut w, r);
    }
    let index_offset = w.len() as u64;
    for (r, off) in cache.records.iter().zip(&offsets) {
        w.u32(r.video_id);
        w.u32(r.t as u32);
        w.u32(r.layer as u32);
        w.u64(*off);
    }
    w.u64(index_offset);
    w.seal()
}

struct Header {
    width: usize,
    frames: usize,
    coords: Vec<(usize, usize)>,
    n_videos: usize,
    n_records: usize,
}

fn read_header(r: &mut Reader) -> Result<Header> {
    r.magic(CACHE_MAGIC)?;
    let width = r.u32()? as usize;
    let frames = r.u32()? as usize;
    let nc = r.u32()? as usize;
    let mut coords = Vec::with_capacity(nc);
    for _ in 0..nc {
        coords.push((r.u32()? as usize, r.u32()? as usize));
    }
    let n_videos = r.u32()? as usize;
    let n_records = r.u32()? as usize;
    Ok(Header {
        width,
        frames,
        coords,
        n_videos,
        n_records,
    })
}

pub fn decode_cache(bytes: &[u8], path: &Path) -> Result<FeatureCache> {
    let mut r = Reader::sealed(bytes, path)?;
    let h = read_header(&mut r)?;
    let mut records = Vec::with_capacity(h.n_records);
    for _ in 0..h.n_records {
        records.push(read_record(&mut r, h.frames, h.width)?);
    }
    let index_offset = r.position();
    for rec in &records {
        let (v, t, l, _off) = (r.u32()?, r.u32()? as usize, r.u32()? as usize, r.u64()?);
        if (v, t, l) != (rec.video_id, rec.t, rec.layer) {
            return Err(r.err("index does not match record order"));
        }
    }
    if r.u64()? != index_offset as u64 {
        return Err(r.err("index offset mismatch"));
    }
    r.finish()?;
    FeatureCache::new(h.width, h.frames, h.coords, h.n_videos, records)
}

/// Reads one record through the index without scanning the payload.
pub fn read_indexed(bytes: &[u8], path: &Path, video_id: u32, t: usize, layer: usize) -> Result<Option<FeatureRecord>> {
    let mut r = Reader::sealed(bytes, path)?;
    let h = read_header(&mut r)?;
    let tail = bytes.len() - 4 - 8;
    r.seek(tail)?;
    let index_offset = r.u64()? as usize;
    r.seek(index_offset)?;
    for _ in 0..h.n_records {
        let (v, rt, rl, off) = (r.u32()?, r.u32()? as usize, r.u32()? as usize, r.u64()?);
        if (v, rt, rl) == (video_id, t, layer) {
            let mut rr = Reader::new(&bytes[..tail], path);
            rr.seek(off as usize)?;
            return read_record(&mut rr, h.frames, h.width).map(Some);
        }
    }
    Ok(None)
}

pub fn write_cache(path: &Path, cache: &FeatureCache) -> Result<()> {
    binio::write_atomic(path, &encode_cache(cache))
}

pub fn read_cache(path: &Path) -> Result<FeatureCache> {
    decode_cache(&binio::read_file(path)?, path)
}
