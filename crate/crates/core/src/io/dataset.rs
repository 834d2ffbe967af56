use std::path::Path;

use super::{put_f32s, put_u32, read_file, write_atomic, Reader};
use crate::env::Observation;
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RLVD";
pub const DATASET_VERSION: u32 = 1;

pub fn quantize(values: &[f32]) -> Vec<u8> {
    values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

pub fn dequantize(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| b as f32 / 255.0).collect()
}

/// Snaps an observation onto the 8-bit grid used for storage.
pub fn quantize_observation(obs: &Observation) -> Observation {
    let t = Tensor::new(obs.tensor().shape().to_vec(), dequantize(&quantize(obs.data()))).expect("same shape");
    Observation::new(t).expect("values in [0, 1]")
}

/// Frames gathered from agent rollouts with per-frame metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    pub shape: [usize; 3],
    pub action_count: usize,
    pub frames: Vec<Observation>,
    /// Action taken in each frame.
    pub actions: Vec<usize>,
    /// Reward received for that action.
    pub rewards: Vec<f32>,
    /// Agent q-vector on the stored frame.
    pub q: Vec<Vec<f32>>,
    pub terminals: Vec<bool>,
}

impl FrameDataset {
    pub fn new(shape: [usize; 3], action_count: usize) -> Self {
        Self { shape, action_count, frames: vec![], actions: vec![], rewards: vec![], q: vec![], terminals: vec![] }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn push(&mut self, frame: Observation, action: usize, reward: f32, q: Vec<f32>, terminal: bool) -> Result<()> {
        if frame.shape() != self.shape {
            return Err(Error::dim(format!("frame {:?} does not match dataset {:?}", frame.shape(), self.shape)));
        }
        if q.len() != self.action_count || action >= self.action_count {
            return Err(Error::dim(format!("q-vector of {} values / action {action} for {} actions", q.len(), self.action_count)));
        }
        self.frames.push(frame);
        self.actions.push(action);
        self.rewards.push(reward);
        self.q.push(q);
        self.terminals.push(terminal);
        Ok(())
    }

    /// First `n` frames (or all, if fewer).
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            shape: self.shape,
            action_count: self.action_count,
            frames: self.frames[..n].to_vec(),
            actions: self.actions[..n].to_vec(),
            rewards: self.rewards[..n].to_vec(),
            q: self.q[..n].to_vec(),
            terminals: self.terminals[..n].to_vec(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let [k, h, w] = self.shape;
        let mut out = Vec::with_capacity(24 + self.len() * (k * h * w + 9 + 4 * self.action_count));
        out.extend_from_slice(DATASET_MAGIC);
        for v in [DATASET_VERSION, self.len() as u32, h as u32, w as u32, k as u32, self.action_count as u32] {
            put_u32(&mut out, v);
        }
        for i in 0..self.len() {
            out.extend(quantize(self.frames[i].data()));
            put_u32(&mut out, self.actions[i] as u32);
            put_f32s(&mut out, &[self.rewards[i]]);
            put_f32s(&mut out, &self.q[i]);
            out.push(self.terminals[i] as u8);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(DATASET_MAGIC)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported dataset version {version}") });
        }
        let count = r.u32()? as usize;
        let (h, w, k, m) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if h == 0 || w == 0 || k == 0 || m == 0 {
            return r.fail("zero extent in dataset header");
        }
        let per = k * h * w;
        let need = count as u128 * (per as u128 + 9 + 4 * m as u128);
        if need > (bytes.len() as u128 - r.offset() as u128) {
            return r.fail(format!("truncated: header announces {count} frames"));
        }
        let mut ds = FrameDataset::new([k, h, w], m);
        for _ in 0..count {
            let px = dequantize(r.bytes(per)?);
            let action = r.u32()? as usize;
            if action >= m {
                return r.fail(format!("action {action} out of range"));
            }
            let reward = r.f32()?;
            let q = r.f32s(m)?;
            let terminal = match r.u8()? {
                0 => false,
                1 => true,
                v => return r.fail(format!("terminal flag {v}")),
            };
            let frame = Observation::new(Tensor::new(vec![k, h, w], px)?)?;
            ds.push(frame, action, reward, q, terminal)?;
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path, "collect")?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FrameDataset {
        let mut ds = FrameDataset::new([2, 4, 4], 3);
        for i in 0..5 {
            let px: Vec<f32> = (0..32).map(|j| ((i * 32 + j) % 17) as f32 / 16.0).collect();
            let obs = quantize_observation(&Observation::new(Tensor::new(vec![2, 4, 4], px).unwrap()).unwrap());
            ds.push(obs, i % 3, i as f32 * 0.5, vec![0.1, -2.0, i as f32], i == 4).unwrap();
        }
        ds
    }

    #[test]
    fn quantization_error_within_half_step() {
        let v: Vec<f32> = (0..=1000).map(|i| i as f32 / 1000.0).collect();
        for (a, b) in v.iter().zip(dequantize(&quantize(&v))) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-7);
        }
    }

    #[test]
    fn round_trip_is_exact_for_quantized_frames() {
        let ds = sample();
        let bytes = ds.to_bytes();
        let back = FrameDataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn truncation_and_bad_magic_are_format_errors() {
        let bytes = sample().to_bytes();
        for cut in [0, 3, 10, 30, bytes.len() - 1] {
            assert!(matches!(FrameDataset::from_bytes(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(FrameDataset::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn missing_file_names_producer() {
        let err = FrameDataset::load(Path::new("/nonexistent/rlviz/frames.rlvd")).unwrap_err();
        assert!(err.to_string().contains("probe collect"), "{err}");
    }
}
