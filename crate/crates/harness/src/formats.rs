//! Binary sequence and checkpoint files.
//!
//! Layout: 4-byte magic, `u32` version, then tagged sections (`[u8; 4]` tag,
//! `u64` byte length, payload), then a CRC-32 of everything before it. All
//! integers and floats are little-endian; sequence data is stored as `f32`.

use std::path::Path;

use maskmotion_core::autodiff::{AdamW, ParamStore, Tensor};
use maskmotion_core::body::{LocalPose, SkeletonConfig};
use maskmotion_core::geometry::{CameraIntrinsics, Rotation6D, Trajectory, TrajectoryFrame};
use maskmotion_core::linalg::PointSeq;
use maskmotion_core::scalar::{lit, Scalar};
use maskmotion_model::network::{ModelWeights, NetworkConfig, ObservationSeq};
use maskmotion_model::tokenizer::{TokenizerConfig, TokenizerWeights};
use maskmotion_model::training::{Stage, StageConfig, Trainer};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};
use crate::synthetic::{MotionFamily, MotionSequence};

pub const SEQUENCE_MAGIC: [u8; 4] = *b"MMSQ";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MMCK";
pub const FORMAT_VERSION: u32 = 1;

/// First 8 bytes (LE) of a SHA-256 over the skeleton's topology, offsets and
/// skinning weights.
pub fn skeleton_hash<T: Scalar>(skel: &SkeletonConfig<T>) -> u64 {
    let mut h = Sha256::new();
    h.update((skel.joint_count as u64).to_le_bytes());
    for p in &skel.parent {
        h.update(p.to_le_bytes());
    }
    for o in &skel.bone_offset {
        for x in o {
            h.update(x.as_f64().to_le_bytes());
        }
    }
    for f in &skel.foot_joint_ids {
        h.update((*f as u64).to_le_bytes());
    }
    h.update((skel.vertex_count as u64).to_le_bytes());
    for w in &skel.vertex_weights {
        h.update(w.as_f64().to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha-256 has 32 bytes"))
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, x: u8) {
        self.buf.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn f32(&mut self, x: f64) {
        self.buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("length fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn bools(&mut self, b: &[bool]) {
        self.len(b.len());
        self.buf.extend(b.iter().map(|&x| u8::from(x)));
    }
    /// Scalars at the width of `T`.
    fn scalars<T: Scalar>(&mut self, xs: &[T]) {
        self.len(xs.len());
        for &x in xs {
            if std::mem::size_of::<T>() == 4 {
                self.f32(x.as_f64());
            } else {
                self.f64(x.as_f64());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("record runs past its section"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f32(&mut self) -> Result<f64> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.buf.len() - self.pos {
            return Err(corrupt("length prefix exceeds section"));
        }
        Ok(n)
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid utf-8"))
    }
    fn bools(&mut self) -> Result<Vec<bool>> {
        let n = self.len()?;
        self.take(n)?
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                _ => Err(corrupt("invalid flag byte")),
            })
            .collect()
    }
    fn scalars<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let n = self.len()?;
        (0..n).map(|_| Ok(lit(if std::mem::size_of::<T>() == 4 { self.f32()? } else { self.f64()? }))).collect()
    }
    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt("trailing bytes in section"));
        }
        Ok(())
    }
}

fn corrupt(msg: &str) -> HarnessError {
    HarnessError::CorruptFile(msg.to_string())
}

fn container(magic: [u8; 4], sections: &[([u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (tag, body) in sections {
        out.extend_from_slice(tag);
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(body);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Checks magic, checksum and version; returns the sections in file order.
fn open_container(bytes: &[u8], magic: [u8; 4]) -> Result<Vec<([u8; 4], &[u8])>> {
    if bytes.len() < 12 {
        return Err(corrupt("file too short"));
    }
    if bytes[..4] != magic {
        return Err(corrupt("bad magic"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(corrupt("checksum mismatch"));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(HarnessError::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let mut r = Reader::new(&body[8..]);
    let mut out = Vec::new();
    while r.pos < r.buf.len() {
        let tag: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        let n = usize::try_from(r.u64()?).map_err(|_| corrupt("section too large"))?;
        out.push((tag, r.take(n)?));
    }
    Ok(out)
}

fn section<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Option<&'a [u8]> {
    sections.iter().find(|(t, _)| t == tag).map(|(_, b)| *b)
}

fn required<'a>(sections: &[([u8; 4], &'a [u8])], tag: &[u8; 4]) -> Result<&'a [u8]> {
    section(sections, tag).ok_or_else(|| corrupt(&format!("missing section {}", String::from_utf8_lossy(tag))))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceHeader {
    pub fps: f64,
    pub joints: usize,
    pub vertices: usize,
    /// Tokens per frame; 0 when no token ids are stored.
    pub tokens: usize,
    /// Codebook size; 0 when no token ids are stored.
    pub codebook_size: usize,
    pub skeleton_hash: u64,
}

/// World-frame joints and vertices, stored for predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldBody {
    pub joints: PointSeq<f64>,
    pub vertices: PointSeq<f64>,
}

/// One sequence with optional token ids, observations and world body.
/// Predictions carry no local poses or contacts (empty vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    pub sequence: MotionSequence,
    /// `F·P` ids, frame-major.
    pub tokens: Option<Vec<usize>>,
    pub observations: Option<ObservationSeq<f64>>,
    pub world: Option<WorldBody>,
}

impl SequenceRecord {
    pub fn new(sequence: MotionSequence) -> Self {
        SequenceRecord { sequence, tokens: None, observations: None, world: None }
    }

    /// Stored world body, or FK of the stored poses.
    pub fn world_body(&self, skel: &SkeletonConfig<f64>) -> Result<WorldBody> {
        if let Some(w) = &self.world {
            return Ok(w.clone());
        }
        if self.sequence.poses.is_empty() {
            return Err(HarnessError::Config(format!("sequence {} has neither poses nor a world body", self.sequence.name)));
        }
        let bodies = self.sequence.world_bodies(skel)?;
        Ok(WorldBody {
            joints: PointSeq::from_frames(bodies.iter().map(|b| b.joints.clone()).collect()),
            vertices: PointSeq::from_frames(bodies.into_iter().map(|b| b.vertices).collect()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFile {
    pub header: SequenceHeader,
    pub records: Vec<SequenceRecord>,
}

fn family_code(f: Option<MotionFamily>) -> u8 {
    f.map_or(0, |f| 1 + MotionFamily::ALL.iter().position(|&x| x == f).expect("listed") as u8)
}

fn family_of(code: u8) -> Result<Option<MotionFamily>> {
    match code {
        0 => Ok(None),
        c => MotionFamily::ALL.get(c as usize - 1).copied().map(Some).ok_or_else(|| corrupt("unknown motion family")),
    }
}

impl SequenceFile {
    pub fn new(skel: &SkeletonConfig<f64>, fps: f64, tokens: usize, codebook_size: usize) -> Self {
        SequenceFile {
            header: SequenceHeader {
                fps,
                joints: skel.joint_count,
                vertices: skel.vertex_count,
                tokens,
                codebook_size,
                skeleton_hash: skeleton_hash(skel),
            },
            records: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut w = Writer::default();
        w.f32(h.fps);
        for n in [h.joints, h.vertices, h.tokens, h.codebook_size] {
            w.len(n);
        }
        w.u64(h.skeleton_hash);
        w.len(self.records.len());
        let header = w.buf;
        let mut sections = vec![(*b"HEAD", header)];
        for rec in &self.records {
            sections.push((*b"SEQN", self.record_bytes(rec)?));
        }
        Ok(container(SEQUENCE_MAGIC, &sections))
    }

    fn record_bytes(&self, rec: &SequenceRecord) -> Result<Vec<u8>> {
        let s = &rec.sequence;
        let (f, j) = (s.traj.len(), self.header.joints);
        let shape_err = |what: &str| HarnessError::Config(format!("sequence {}: {what}", s.name));
        let has_poses = !s.poses.is_empty();
        let has_contacts = !s.contacts.is_empty();
        if (has_poses && s.poses.len() != f) || (has_contacts && s.contacts.len() != f) || s.poses.iter().any(|p| p.joint_rotations.len() != j) {
            return Err(shape_err("frame or joint counts disagree with the header"));
        }
        let mut w = Writer::default();
        w.str(&s.name);
        w.u8(family_code(s.family));
        w.len(f);
        for fr in &s.traj.frames {
            fr.to_array().iter().for_each(|&x| w.f32(x));
        }
        w.u8(u8::from(has_poses));
        for p in &s.poses {
            p.joint_rotations.iter().flat_map(|r| r.r).for_each(|x| w.f32(x));
        }
        w.u8(u8::from(has_contacts));
        for c in &s.contacts {
            w.bools(c);
        }
        match &rec.tokens {
            Some(ids) => {
                if ids.len() != f * self.header.tokens || ids.iter().any(|&i| i >= self.header.codebook_size) {
                    return Err(shape_err("token ids disagree with the header"));
                }
                w.u8(1);
                for &i in ids {
                    w.len(i);
                }
            }
            None => w.u8(0),
        }
        match &rec.observations {
            Some(o) => {
                if o.frames() != f || o.joints != j {
                    return Err(shape_err("observations disagree with the sequence"));
                }
                w.u8(1);
                w.len(o.features.rows);
                w.len(o.features.cols);
                for &x in &o.features.data {
                    w.f32(x);
                }
                for b in &o.bbox {
                    b.iter().for_each(|&x| w.f32(x));
                }
                w.f32(o.cam.focal);
                o.cam.principal_point.iter().chain(&o.cam.image_size).for_each(|&x| w.f32(x));
                w.bools(&o.visibility);
            }
            None => w.u8(0),
        }
        match &rec.world {
            Some(b) => {
                if b.joints.frames != f || b.joints.points != j || b.vertices.frames != f || b.vertices.points != self.header.vertices {
                    return Err(shape_err("world body disagrees with the header"));
                }
                w.u8(1);
                b.joints.data.iter().chain(&b.vertices.data).flatten().for_each(|&x| w.f32(x));
            }
            None => w.u8(0),
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = open_container(bytes, SEQUENCE_MAGIC)?;
        let mut r = Reader::new(required(&sections, b"HEAD")?);
        let fps = r.f32()?;
        let (joints, vertices, tokens, codebook_size) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let header = SequenceHeader { fps, joints, vertices, tokens, codebook_size, skeleton_hash: r.u64()? };
        let count = r.u32()? as usize;
        r.done()?;
        let records = sections
            .iter()
            .filter(|(t, _)| t == b"SEQN")
            .map(|(_, b)| Self::read_record(b, &header))
            .collect::<Result<Vec<_>>>()?;
        if records.len() != count {
            return Err(corrupt("record count disagrees with the header"));
        }
        Ok(SequenceFile { header, records })
    }

    fn read_record(bytes: &[u8], h: &SequenceHeader) -> Result<SequenceRecord> {
        let mut r = Reader::new(bytes);
        let name = r.str()?;
        let family = family_of(r.u8()?)?;
        let f = r.u32()? as usize;
        let frames = (0..f)
            .map(|_| Ok(TrajectoryFrame::from_array(&(0..9).map(|_| r.f32()).collect::<Result<Vec<_>>>()?)))
            .collect::<Result<Vec<_>>>()?;
        let poses = match r.u8()? {
            0 => Vec::new(),
            1 => (0..f)
                .map(|_| {
                    let rots = (0..h.joints)
                        .map(|_| {
                            let mut q = [0.0; 6];
                            for v in q.iter_mut() {
                                *v = r.f32()?;
                            }
                            Ok(Rotation6D::new(q))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(LocalPose { joint_rotations: rots })
                })
                .collect::<Result<Vec<_>>>()?,
            _ => return Err(corrupt("invalid pose flag")),
        };
        let contacts = match r.u8()? {
            0 => Vec::new(),
            1 => (0..f).map(|_| r.bools()).collect::<Result<Vec<_>>>()?,
            _ => return Err(corrupt("invalid contact flag")),
        };
        let tokens = match r.u8()? {
            0 => None,
            1 => {
                let ids = (0..f * h.tokens).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
                if ids.iter().any(|&i| i >= h.codebook_size) {
                    return Err(corrupt("token id outside the codebook"));
                }
                Some(ids)
            }
            _ => return Err(corrupt("invalid token flag")),
        };
        let observations = match r.u8()? {
            0 => None,
            1 => {
                let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
                let data = (0..rows * cols).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                let bbox = (0..f).map(|_| Ok([r.f32()?, r.f32()?, r.f32()?])).collect::<Result<Vec<_>>>()?;
                let focal = r.f32()?;
                let pp = [r.f32()?, r.f32()?];
                let size = [r.f32()?, r.f32()?];
                let visibility = r.bools()?;
                if visibility.len() != f * h.joints {
                    return Err(corrupt("visibility size"));
                }
                let cam = CameraIntrinsics::new(focal, pp, size).map_err(|_| corrupt("invalid intrinsics"))?;
                Some(ObservationSeq { features: Tensor::from_vec(rows, cols, data), bbox, cam, visibility, joints: h.joints })
            }
            _ => return Err(corrupt("invalid observation flag")),
        };
        let world = match r.u8()? {
            0 => None,
            1 => {
                let mut pts = |n: usize| (0..f * n).map(|_| Ok([r.f32()?, r.f32()?, r.f32()?])).collect::<Result<Vec<_>>>();
                let joints = PointSeq { frames: f, points: h.joints, data: pts(h.joints)? };
                let vertices = PointSeq { frames: f, points: h.vertices, data: pts(h.vertices)? };
                Some(WorldBody { joints, vertices })
            }
            _ => return Err(corrupt("invalid world-body flag")),
        };
        r.done()?;
        let sequence = MotionSequence { name, family, fps: h.fps, traj: Trajectory::new(frames, h.fps), poses, contacts };
        Ok(SequenceRecord { sequence, tokens, observations, world })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    /// Loads and checks the skeleton hash.
    pub fn load_for(path: &Path, skel: &SkeletonConfig<f64>) -> Result<Self> {
        let file = Self::load(path)?;
        file.check_skeleton(skel)?;
        Ok(file)
    }

    pub fn check_skeleton(&self, skel: &SkeletonConfig<f64>) -> Result<()> {
        let expected = skeleton_hash(skel);
        if self.header.skeleton_hash != expected {
            return Err(HarnessError::SkeletonMismatch { found: self.header.skeleton_hash, expected });
        }
        Ok(())
    }

    /// Debug export; not read back.
    pub fn to_json(&self) -> serde_json::Value {
        let records: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|rec| {
                let s = &rec.sequence;
                serde_json::json!({
                    "name": s.name,
                    "family": s.family.map(|f| f.name()),
                    "trajectory": s.traj.frames.iter().map(|fr| fr.to_array().to_vec()).collect::<Vec<_>>(),
                    "poses": s.poses.iter().map(|p| p.joint_rotations.iter().map(|r| r.r.to_vec()).collect::<Vec<_>>()).collect::<Vec<_>>(),
                    "contacts": s.contacts,
                    "tokens": rec.tokens,
                    "visibility": rec.observations.as_ref().map(|o| o.visibility.clone()),
                    "bbox": rec.observations.as_ref().map(|o| o.bbox.clone()),
                })
            })
            .collect();
        serde_json::json!({ "header": self.header, "sequences": records })
    }
}

/// Everything needed to rebuild the weights and the trainer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub tokenizer: TokenizerConfig,
    pub network: Option<NetworkConfig>,
    pub stage: Option<StageConfig>,
    pub skeleton_hash: u64,
    pub dataset_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub model: AdamW<T>,
    pub smoother: AdamW<T>,
}

/// The trainer's random streams are pure functions of `(seed, stage, step)`,
/// so `seed` and `step` are the whole RNG state.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub hyper: Hyperparameters,
    pub tokenizer: TokenizerWeights<T>,
    pub model: Option<ModelWeights<T>>,
    pub optimizer: Option<OptimizerState<T>>,
    pub seed: u64,
    pub step: u64,
}

fn params_bytes<T: Scalar>(p: &ParamStore<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.len(p.len());
    for (name, v) in p.names().iter().zip(&p.values) {
        w.str(name);
        w.len(v.rows);
        w.len(v.cols);
        w.scalars(&v.data);
    }
    w.buf
}

fn read_params<T: Scalar>(bytes: &[u8], into: &mut ParamStore<T>) -> Result<()> {
    let mut r = Reader::new(bytes);
    if r.u32()? as usize != into.len() {
        return Err(corrupt("parameter count disagrees with the hyperparameters"));
    }
    for i in 0..into.len() {
        let name = r.str()?;
        let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
        let data = r.scalars::<T>()?;
        if name != into.names()[i] || (rows, cols) != into.values[i].shape() || data.len() != rows * cols {
            return Err(corrupt(&format!("parameter {name} disagrees with the hyperparameters")));
        }
        into.values[i].data = data;
    }
    r.done()
}

fn adam_bytes<T: Scalar>(o: &AdamW<T>) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(o.step);
    w.len(o.m.len());
    for (m, v) in o.m.iter().zip(&o.v) {
        w.scalars(&m.data);
        w.scalars(&v.data);
    }
    w.buf
}

fn read_adam<T: Scalar>(r: &mut Reader<'_>, into: &mut AdamW<T>) -> Result<()> {
    into.step = r.u64()?;
    if r.u32()? as usize != into.m.len() {
        return Err(corrupt("optimizer slot count"));
    }
    for (m, v) in into.m.iter_mut().zip(into.v.iter_mut()) {
        for t in [m, v] {
            let data = r.scalars::<T>()?;
            if data.len() != t.data.len() {
                return Err(corrupt("optimizer slot shape"));
            }
            t.data = data;
        }
    }
    Ok(())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.hyper).expect("hyperparameters serialize");
        let mut meta = Writer::default();
        meta.u8(std::mem::size_of::<T>() as u8);
        meta.u64(self.seed);
        meta.u64(self.step);
        let mut sections = vec![
            (*b"META", meta.buf),
            (*b"HYPR", json),
            (*b"TOKW", params_bytes(&self.tokenizer.params)),
            (*b"SMTH", params_bytes(&self.tokenizer.smoother)),
        ];
        if let Some(m) = &self.model {
            sections.push((*b"MODW", params_bytes(&m.params)));
        }
        if let Some(o) = &self.optimizer {
            let mut b = adam_bytes(&o.model);
            b.extend(adam_bytes(&o.smoother));
            sections.push((*b"OPTM", b));
        }
        container(CHECKPOINT_MAGIC, &sections)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = open_container(bytes, CHECKPOINT_MAGIC)?;
        let mut meta = Reader::new(required(&sections, b"META")?);
        let width = meta.u8()?;
        if width as usize != std::mem::size_of::<T>() {
            return Err(HarnessError::Config(format!("checkpoint stores {}-byte floats", width)));
        }
        let (seed, step) = (meta.u64()?, meta.u64()?);
        meta.done()?;
        let hyper: Hyperparameters =
            serde_json::from_slice(required(&sections, b"HYPR")?).map_err(|e| corrupt(&format!("hyperparameters: {e}")))?;
        let mut tokenizer = TokenizerWeights::<T>::new(hyper.tokenizer, 0);
        read_params(required(&sections, b"TOKW")?, &mut tokenizer.params)?;
        read_params(required(&sections, b"SMTH")?, &mut tokenizer.smoother)?;
        let model = match (hyper.network, section(&sections, b"MODW")) {
            (Some(cfg), Some(b)) => {
                let mut m = ModelWeights::<T>::new(cfg, 0)?;
                read_params(b, &mut m.params)?;
                Some(m)
            }
            (None, None) => None,
            _ => return Err(corrupt("model weights and network hyperparameters disagree")),
        };
        let optimizer = match (section(&sections, b"OPTM"), &model, &hyper.stage) {
            (None, _, _) => None,
            (Some(b), Some(m), Some(stage)) => {
                let mut r = Reader::new(b);
                let mut oc = stage.optimizer;
                oc.total_steps = Trainer::<T>::planned_steps(stage, hyper.dataset_len);
                let mut state = OptimizerState { model: AdamW::new(oc, &m.params), smoother: AdamW::new(oc, &tokenizer.smoother) };
                read_adam(&mut r, &mut state.model)?;
                read_adam(&mut r, &mut state.smoother)?;
                r.done()?;
                Some(state)
            }
            _ => return Err(corrupt("optimizer state without a model and stage")),
        };
        Ok(Checkpoint { hyper, tokenizer, model, optimizer, seed, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn check_skeleton(&self, skel: &SkeletonConfig<f64>) -> Result<()> {
        let expected = skeleton_hash(skel);
        if self.hyper.skeleton_hash != expected {
            return Err(HarnessError::SkeletonMismatch { found: self.hyper.skeleton_hash, expected });
        }
        Ok(())
    }

    pub fn stage(&self) -> Option<Stage> {
        self.hyper.stage.as_ref().map(|s| s.stage)
    }

    /// Snapshot of a trainer between optimizer steps.
    pub fn from_trainer(t: &Trainer<T>, skel: &SkeletonConfig<f64>, seed: u64) -> Self {
        Checkpoint {
            hyper: Hyperparameters {
                tokenizer: t.tokenizer.config,
                network: Some(t.model.config),
                stage: Some(t.config.clone()),
                skeleton_hash: skeleton_hash(skel),
                dataset_len: t.dataset_len,
            },
            tokenizer: t.tokenizer.clone(),
            model: Some(t.model.clone()),
            optimizer: Some(OptimizerState { model: t.opt.clone(), smoother: t.smoother_opt.clone() }),
            seed,
            step: t.step,
        }
    }

    /// Rebuilds the trainer this checkpoint was taken from.
    pub fn into_trainer(self, skel: &SkeletonConfig<f64>) -> Result<Trainer<T>> {
        self.check_skeleton(skel)?;
        let (Some(model), Some(stage)) = (self.model, self.hyper.stage) else {
            return Err(HarnessError::Config("checkpoint holds no stage to resume".into()));
        };
        let mut t = Trainer::new(model, self.tokenizer, skel.cast(), stage, self.hyper.dataset_len)?;
        if let Some(o) = self.optimizer {
            t.opt = o.model;
            t.smoother_opt = o.smoother;
        }
        t.step = self.step;
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{build_samples, training_observations, TrainOcclusion};
    use crate::observe::default_camera;
    use crate::synthetic::{generate_dataset, SyntheticMotionConfig};

    fn skel() -> SkeletonConfig<f64> {
        SkeletonConfig::desk_default()
    }

    fn data(n: usize, frames: usize) -> Vec<MotionSequence> {
        generate_dataset(&SyntheticMotionConfig { num_sequences: n, frames, seed: 4, ..Default::default() }, &skel()).unwrap()
    }

    fn tok_config(skel: &SkeletonConfig<f64>) -> TokenizerConfig {
        TokenizerConfig { vertices: skel.vertex_count, tokens: 4, latent: 4, codebook_size: 8, hidden: 16, ..TokenizerConfig::default() }
    }

    fn net_config(skel: &SkeletonConfig<f64>) -> NetworkConfig {
        NetworkConfig { width: 16, depth: 1, heads: 2, ffn_mult: 2, window: 4, tokens: 4, codebook_size: 8, obs_dim: 3 * skel.joint_count, obs_tokens: 1 }
    }

    fn sample_file() -> SequenceFile {
        let skel = skel();
        let seqs = data(3, 12);
        let mut file = SequenceFile::new(&skel, 30.0, 4, 8);
        for (i, s) in seqs.into_iter().enumerate() {
            let mut r = SequenceRecord::new(s);
            if i > 0 {
                r.tokens = Some((0..12 * 4).map(|k| (k * 5 + i) % 8).collect());
            }
            if i == 1 {
                let o = training_observations(&r.sequence, &skel, &default_camera(), &TrainOcclusion::default(), 1, 1).unwrap();
                r.observations = Some(o);
            }
            if i == 2 {
                r.world = Some(r.world_body(&skel).unwrap());
                r.sequence.poses.clear();
                r.sequence.contacts.clear();
            }
            file.records.push(r);
        }
        file
    }

    #[test]
    fn sequence_files_round_trip_byte_exact() {
        let file = sample_file();
        let bytes = file.to_bytes().unwrap();
        let back = SequenceFile::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.header, file.header);
        assert_eq!(back.records.len(), 3);
        assert!(back.records[0].tokens.is_none() && back.records[1].observations.is_some());
        assert!(back.records[2].sequence.poses.is_empty() && back.records[2].world.is_some());
        // stored at f32 precision
        let (a, b) = (&file.records[0].sequence, &back.records[0].sequence);
        assert_eq!(a.name, b.name);
        assert_eq!(a.contacts, b.contacts);
        for (x, y) in a.traj.frames.iter().zip(&b.traj.frames) {
            for (p, q) in x.to_array().iter().zip(y.to_array()) {
                assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
            }
        }
    }

    #[test]
    fn files_round_trip_on_disk() {
        let dir = std::env::temp_dir().join(format!("mm_formats_{}", std::process::id()));
        let path = dir.join("seqs.mmsq");
        let file = sample_file();
        file.save(&path).unwrap();
        let back = SequenceFile::load_for(&path, &skel()).unwrap();
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&path).unwrap());
        std::fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample_file().to_bytes().unwrap();
        for cut in [0, 5, 11, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(SequenceFile::from_bytes(&bytes[..cut]), Err(HarnessError::CorruptFile(_))), "cut at {cut}");
        }
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x10;
        assert!(matches!(SequenceFile::from_bytes(&flipped), Err(HarnessError::CorruptFile(_))));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(HarnessError::CorruptFile(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = sample_file().to_bytes().unwrap();
        let n = bytes.len();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(SequenceFile::from_bytes(&bytes), Err(HarnessError::VersionMismatch { found: 7, expected: 1 })));
    }

    #[test]
    fn skeleton_mismatch_is_reported() {
        let file = sample_file();
        let mut other = skel();
        other.bone_offset[3][1] += 0.01;
        assert_ne!(skeleton_hash(&other), skeleton_hash(&skel()));
        assert!(file.check_skeleton(&skel()).is_ok());
        assert!(matches!(file.check_skeleton(&other), Err(HarnessError::SkeletonMismatch { .. })));
    }

    #[test]
    fn world_body_falls_back_to_kinematics() {
        let skel = skel();
        let s = data(1, 6).remove(0);
        let w = SequenceRecord::new(s.clone()).world_body(&skel).unwrap();
        assert_eq!(w.joints, s.world_joints(&skel).unwrap());
        let mut empty = s;
        empty.poses.clear();
        assert!(SequenceRecord::new(empty).world_body(&skel).is_err());
    }

    #[test]
    fn checkpoint_resume_reproduces_the_next_step() {
        let skel = skel();
        let seqs = data(4, 8);
        let cam = default_camera();
        let obs: Vec<_> = seqs.iter().enumerate().map(|(i, s)| training_observations(s, &skel, &cam, &TrainOcclusion::default(), 2, i as u64).unwrap()).collect();
        let tok = TokenizerWeights::<f64>::new(tok_config(&skel), 3);
        let samples = build_samples(&seqs, Some(&obs), &skel, &tok).unwrap();
        let model = ModelWeights::<f64>::new(net_config(&skel), 5).unwrap();
        let stage = StageConfig { epochs: 2, batch_size: 2, ..StageConfig::for_stage(Stage::Video) };
        let mut a = Trainer::new(model, tok, skel.clone(), stage, samples.len()).unwrap();
        for _ in 0..2 {
            a.train_step(&samples).unwrap();
        }
        let bytes = Checkpoint::from_trainer(&a, &skel, 9).to_bytes();
        let ck = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes(), bytes);
        assert_eq!((ck.seed, ck.step, ck.stage()), (9, 2, Some(Stage::Video)));
        let mut b = ck.into_trainer(&skel).unwrap();
        assert_eq!(b.opt, a.opt);
        let (la, lb) = (a.train_step(&samples).unwrap(), b.train_step(&samples).unwrap());
        assert_eq!(la.loss.total.to_bits(), lb.loss.total.to_bits());
        assert_eq!(la.grad_norm.to_bits(), lb.grad_norm.to_bits());
        assert_eq!(a.model.params.values, b.model.params.values);
        assert_eq!(a.tokenizer.smoother.values, b.tokenizer.smoother.values);
    }

    #[test]
    fn f32_checkpoints_keep_their_width() {
        let skel = skel();
        let tok = TokenizerWeights::<f32>::new(tok_config(&skel), 3);
        let ck = Checkpoint {
            hyper: Hyperparameters { tokenizer: tok.config, network: None, stage: None, skeleton_hash: skeleton_hash(&skel), dataset_len: 0 },
            tokenizer: tok,
            model: None,
            optimizer: None,
            seed: 1,
            step: 0,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.tokenizer.params.values, ck.tokenizer.params.values);
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(back.into_trainer(&skel).is_err());
    }
}
