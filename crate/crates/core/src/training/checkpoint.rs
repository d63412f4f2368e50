//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "ATTNGAN\0"
//! version  u32
//! config   u32 length + UTF-8 TOML of the TrainConfig
//! epoch u64, iteration u64, width_base u64, image_channels u64, image_size u64
//! tensors  u32 count, then per record:
//!          u32 name length + name, u32 rank, rank × u64 dims, f32 values
//! adam     6 × u64 step counters (a_x, a_y, t_x, t_y, d_x, d_y)
//! buffers  2 × (u64 capacity, rng state), then the training rng state
//!          rng state = 32-byte seed, u64 stream, u128 word position
//! checksum u64 CRC-64/XZ of every preceding byte
//! ```
//!
//! Tensor record names: `{net}/{param}`, `adam/{net}/m/{i}`,
//! `adam/{net}/v/{i}`, `buffer_x/{i}`, `buffer_y/{i}`.

use std::collections::HashMap;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::networks::{Architecture, ModelBundle, NetId, NetworkParams};
use crate::rng::{Prng, PrngState};
use crate::tensor::Tensor;

use super::{AdamState, ReplayBuffer, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"ATTNGAN\0";
pub const VERSION: u32 = 1;
const CRC: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f32]) {
        self.bytes(name.as_bytes());
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn rng(&mut self, s: &PrngState) {
        self.0.extend_from_slice(&s.seed);
        self.u64(s.stream);
        self.0.extend_from_slice(&s.word_pos.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn truncated() -> Error {
    Error::Checkpoint("truncated file".into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(truncated)?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("size overflow".into()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let name = self.string()?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.usize()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(truncated)?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }
    fn rng(&mut self) -> Result<PrngState> {
        Ok(PrngState {
            seed: self.array()?,
            stream: self.u64()?,
            word_pos: u128::from_le_bytes(self.array()?),
        })
    }
}

fn architecture(id: NetId, width: usize, channels: usize) -> Architecture {
    match id {
        NetId::AX | NetId::AY => Architecture::attention(width, channels),
        NetId::TX | NetId::TY => Architecture::transform(width, channels),
        NetId::DX | NetId::DY => Architecture::discriminator(width, channels),
    }
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let config = toml::to_string(&state.config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let b = &state.bundle;
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.bytes(config.as_bytes());
    for v in [state.epoch as u64, state.iteration, b.width_base as u64, b.image_channels as u64, b.image_size as u64] {
        w.u64(v);
    }
    let mut records: Vec<(String, &Tensor<f32>)> = Vec::new();
    for id in NetId::ALL {
        for (name, t) in b.net(id).params() {
            records.push((format!("{}/{name}", id.name()), t));
        }
    }
    for (tag, buf) in [("buffer_x", &state.buffer_x), ("buffer_y", &state.buffer_y)] {
        for (i, t) in buf.stored().iter().enumerate() {
            records.push((format!("{tag}/{i}"), t));
        }
    }
    let mut moments = 0;
    for id in NetId::ALL {
        moments += 2 * state.adam[id as usize].m.len();
    }
    w.u32((records.len() + moments) as u32);
    for (name, t) in &records {
        w.tensor(name, t.shape(), t.data());
    }
    for id in NetId::ALL {
        let a = &state.adam[id as usize];
        let shapes = b.net(id).params();
        for (kind, arrays) in [("m", &a.m), ("v", &a.v)] {
            for (i, arr) in arrays.iter().enumerate() {
                w.tensor(&format!("adam/{}/{kind}/{i}", id.name()), shapes[i].1.shape(), arr);
            }
        }
    }
    for id in NetId::ALL {
        w.u64(state.adam[id as usize].step);
    }
    for buf in [&state.buffer_x, &state.buffer_y] {
        w.u64(buf.capacity() as u64);
        w.rng(&buf.rng_state());
    }
    w.rng(&state.rng.state());
    let sum = CRC.checksum(&w.0);
    w.u64(sum);
    Ok(w.0)
}

pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("wrong magic bytes".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(truncated());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {VERSION}"
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if CRC.checksum(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupt or truncated file)".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let config: TrainConfig =
        toml::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let epoch = r.usize()?;
    let iteration = r.u64()?;
    let (width, channels, size) = (r.usize()?, r.usize()?, r.usize()?);
    let count = r.u32()? as usize;
    let mut tensors: HashMap<String, Tensor<f32>> = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record {name}")));
        }
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing record {name}")))
    };
    let mut nets = Vec::new();
    let mut adam = Vec::new();
    for id in NetId::ALL {
        let arch = architecture(id, width, channels);
        let shapes = arch.param_shapes();
        let params = shapes
            .iter()
            .map(|(n, _)| Ok((n.clone(), take(&format!("{}/{n}", id.name()))?)))
            .collect::<Result<Vec<_>>>()?;
        let net = NetworkParams::from_parts(arch, params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut moments = |kind: &str| -> Result<Vec<Vec<f32>>> {
            (0..shapes.len())
                .map(|i| {
                    let t = take(&format!("adam/{}/{kind}/{i}", id.name()))?;
                    if t.shape() != shapes[i].1.as_slice() {
                        return Err(Error::Checkpoint(format!("adam moment shape for {}", id.name())));
                    }
                    Ok(t.into_data())
                })
                .collect()
        };
        let (m, v) = (moments("m")?, moments("v")?);
        adam.push(AdamState { m, v, step: 0 });
        nets.push(net);
    }
    let mut buffer_images = |tag: &str| {
        let mut out = Vec::new();
        while let Ok(t) = take(&format!("{tag}/{}", out.len())) {
            out.push(t);
        }
        out
    };
    let (stored_x, stored_y) = (buffer_images("buffer_x"), buffer_images("buffer_y"));
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected record {extra}")));
    }
    for a in &mut adam {
        a.step = r.u64()?;
    }
    let mut buffers = Vec::new();
    for stored in [stored_x, stored_y] {
        let cap = r.usize()?;
        if stored.len() > cap {
            return Err(Error::Checkpoint("replay buffer exceeds its capacity".into()));
        }
        buffers.push(ReplayBuffer::from_parts(cap, stored, &r.rng()?));
    }
    let rng = Prng::from_state(&r.rng()?);
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after body".into()));
    }
    let mut nets = nets.into_iter();
    let mut next = || nets.next().expect("six networks");
    let bundle = ModelBundle {
        width_base: width,
        image_channels: channels,
        image_size: size,
        a_x: next(),
        a_y: next(),
        t_x: next(),
        t_y: next(),
        d_x: next(),
        d_y: next(),
    };
    let buffer_y = buffers.pop().expect("two buffers");
    let buffer_x = buffers.pop().expect("two buffers");
    Ok(TrainState {
        config,
        bundle,
        adam,
        buffer_x,
        buffer_y,
        rng,
        epoch,
        iteration,
    })
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
