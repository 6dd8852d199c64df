//! Binary checkpoint container for resuming runs and replaying reset
//! experiments.
//!
//! Layout, all integers little-endian except as noted:
//!
//! ```text
//! magic   : 8 bytes, b"PLASBNCH"
//! version : u16 (currently 1)
//! 6 parameter-group blocks, ids 1..=6 in order:
//!     group id     : u8
//!     tensor count : u16
//!     tensors      : rank u8, extents (rank x u32), data (numel x f32)
//! optional sections until EOF:
//!     tag 0x02 (optimizer state):
//!         kind       : u8 (0 sgd, 1 momentum, 2 rmsprop, 3 adam)
//!         step count : u64
//!         two slot banks (first moment, second moment), each:
//!             tensor count : u16
//!             tensors      : same framing as above
//! ```
//!
//! A group's tensor list is its trainable parameters in traversal order,
//! followed by one (running mean, running variance) rank-1 pair per
//! normalization layer it owns. Optimizer slot tensors are stored rank-1 in
//! parameter traversal order.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{Network, GROUP_IDS};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PLASBNCH";
pub const VERSION: u16 = 1;
const SECTION_OPTIMIZER: u8 = 0x02;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub groups: Vec<(u8, Vec<Tensor<f32>>)>,
    pub optimizer: Option<OptimizerSection>,
}

#[derive(Debug, Clone)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    pub step_count: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

fn kind_byte(kind: OptimizerKind) -> u8 {
    match kind {
        OptimizerKind::Sgd => 0,
        OptimizerKind::Momentum => 1,
        OptimizerKind::Rmsprop => 2,
        OptimizerKind::Adam => 3,
    }
}

fn kind_from_byte(b: u8) -> Result<OptimizerKind> {
    Ok(match b {
        0 => OptimizerKind::Sgd,
        1 => OptimizerKind::Momentum,
        2 => OptimizerKind::Rmsprop,
        3 => OptimizerKind::Adam,
        other => return Err(Error::Format(format!("unknown optimizer kind byte {other}"))),
    })
}

/// The tensors a group serializes: parameters, then running-stat pairs.
fn group_tensors(net: &mut Network<f32>, group_idx: usize) -> Vec<Tensor<f32>> {
    let group = &mut net.groups[group_idx];
    let mut tensors = Vec::new();
    for layer in &group.layers {
        layer.visit_params(&mut |t| tensors.push(t.clone()));
    }
    for layer in &mut group.layers {
        layer.visit_norms_mut(&mut |bn| {
            let c = bn.running_mean.len();
            tensors.push(Tensor::new(vec![c], bn.running_mean.clone()).unwrap());
            tensors.push(Tensor::new(vec![c], bn.running_var.clone()).unwrap());
        });
    }
    tensors
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    out.push(t.shape().len() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in &t.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a network (and optionally optimizer state) to checkpoint bytes.
pub fn to_bytes(
    net: &mut Network<f32>,
    optimizer: Option<(&OptimizerState<f32>, OptimizerKind)>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for gi in 0..net.groups.len() {
        let id = net.groups[gi].id;
        let tensors = group_tensors(net, gi);
        out.push(id);
        out.extend_from_slice(&(tensors.len() as u16).to_le_bytes());
        for t in &tensors {
            put_tensor(&mut out, t);
        }
    }
    if let Some((state, kind)) = optimizer {
        out.push(SECTION_OPTIMIZER);
        out.push(kind_byte(kind));
        out.extend_from_slice(&state.step_count.to_le_bytes());
        for bank in [&state.first, &state.second] {
            out.extend_from_slice(&(bank.len() as u16).to_le_bytes());
            for slot in bank {
                out.push(1u8);
                out.extend_from_slice(&(slot.len() as u32).to_le_bytes());
                for &v in slot {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn save(
    net: &mut Network<f32>,
    optimizer: Option<(&OptimizerState<f32>, OptimizerKind)>,
    path: &Path,
) -> Result<()> {
    let bytes = to_bytes(net, optimizer);
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = self.u32()? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| Error::Format("tensor extent overflow".into()))?;
            shape.push(e);
        }
        // Bound the allocation by the bytes actually present.
        if numel > (self.bytes.len() - self.pos) / 4 {
            return Err(Error::Format(format!(
                "tensor claims {numel} elements but only {} bytes remain",
                self.bytes.len() - self.pos
            )));
        }
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Parses checkpoint bytes. Pure: no I/O, no panics on malformed input.
pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut groups = Vec::with_capacity(6);
    for expect_id in GROUP_IDS {
        let id = r.u8()?;
        if id != expect_id {
            return Err(Error::Format(format!(
                "expected group id {expect_id}, found {id}"
            )));
        }
        let count = r.u16()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        groups.push((id, tensors));
    }
    let mut optimizer = None;
    while !r.done() {
        let tag = r.u8()?;
        match tag {
            SECTION_OPTIMIZER => {
                let kind = kind_from_byte(r.u8()?)?;
                let step_count = r.u64()?;
                let mut banks = Vec::with_capacity(2);
                for _ in 0..2 {
                    let count = r.u16()? as usize;
                    let mut bank = Vec::with_capacity(count.min(1024));
                    for _ in 0..count {
                        bank.push(r.tensor()?.data);
                    }
                    banks.push(bank);
                }
                let second = banks.pop().unwrap();
                let first = banks.pop().unwrap();
                optimizer = Some(OptimizerSection {
                    kind,
                    step_count,
                    first,
                    second,
                });
            }
            other => {
                return Err(Error::Format(format!("unknown section tag {other:#04x}")));
            }
        }
    }
    Ok(Checkpoint { groups, optimizer })
}

impl Checkpoint {
    /// Writes parameters and running statistics back into `net`, which must
    /// have the same architecture the checkpoint was taken from.
    pub fn apply_to(&self, net: &mut Network<f32>) -> Result<()> {
        for (gi, (id, tensors)) in self.groups.iter().enumerate() {
            if net.groups[gi].id != *id {
                return Err(Error::Consistency(format!(
                    "group id mismatch: checkpoint {id}, network {}",
                    net.groups[gi].id
                )));
            }
            let mut cursor = 0usize;
            let mut mismatch = None;
            for layer in &mut net.groups[gi].layers {
                layer.visit_params_mut(&mut |t| {
                    if mismatch.is_some() {
                        return;
                    }
                    match tensors.get(cursor) {
                        Some(src) if src.shape() == t.shape() => {
                            t.data.copy_from_slice(&src.data)
                        }
                        _ => mismatch = Some(cursor),
                    }
                    cursor += 1;
                });
            }
            for layer in &mut net.groups[gi].layers {
                layer.visit_norms_mut(&mut |bn| {
                    if mismatch.is_some() {
                        return;
                    }
                    let c = bn.running_mean.len();
                    match (tensors.get(cursor), tensors.get(cursor + 1)) {
                        (Some(m), Some(v)) if m.numel() == c && v.numel() == c => {
                            bn.running_mean.copy_from_slice(&m.data);
                            bn.running_var.copy_from_slice(&v.data);
                        }
                        _ => mismatch = Some(cursor),
                    }
                    cursor += 2;
                });
            }
            if mismatch.is_some() || cursor != tensors.len() {
                return Err(Error::Consistency(format!(
                    "group {id}: checkpoint tensors do not match the network architecture"
                )));
            }
        }
        Ok(())
    }

    /// Restores optimizer slots; shapes must mirror the network's parameters.
    pub fn apply_optimizer(&self, state: &mut OptimizerState<f32>) -> Result<OptimizerKind> {
        let section = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Consistency("checkpoint has no optimizer section".into()))?;
        let check = |bank: &[Vec<f32>], slots: &[Vec<f32>]| -> bool {
            bank.len() == slots.len()
                && bank.iter().zip(slots).all(|(a, b)| a.len() == b.len())
        };
        if !check(&section.first, &state.first) || !check(&section.second, &state.second) {
            return Err(Error::Consistency(
                "optimizer slot shapes do not mirror the network parameters".into(),
            ));
        }
        state.step_count = section.step_count;
        for (dst, src) in state.first.iter_mut().zip(&section.first) {
            dst.copy_from_slice(src);
        }
        for (dst, src) in state.second.iter_mut().zip(&section.second) {
            dst.copy_from_slice(src);
        }
        Ok(section.kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelConfig, ModelKind};
    use crate::optim::{step, OptimizerConfig};

    fn small_resnet(seed: u64) -> Network<f32> {
        let cfg = ModelConfig {
            kind: ModelKind::MiniResnet,
            width_w: 4,
            depth_d: 1,
            num_classes: 3,
            input_shape: [1, 16, 16],
            hidden_sizes: vec![],
        };
        Network::build(cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = small_resnet(3);
        // Perturb running stats so they carry information.
        let x = Tensor::filled(vec![2, 1, 16, 16], 0.7f32);
        let mut tape = crate::tape::Tape::new();
        net.forward(&mut tape, &x, crate::models::Mode::Train).unwrap();

        let mut state = OptimizerState::new(&net);
        net.for_each_param_mut(&mut |_, t| t.grad = Some(vec![0.01; t.numel()]));
        step(&mut net, &mut state, &OptimizerConfig::new(OptimizerKind::Adam, 1e-3)).unwrap();

        let bytes = to_bytes(&mut net, Some((&state, OptimizerKind::Adam)));
        let ckpt = parse(&bytes).unwrap();

        let mut restored = small_resnet(99);
        let mut restored_state = OptimizerState::new(&restored);
        ckpt.apply_to(&mut restored).unwrap();
        let kind = ckpt.apply_optimizer(&mut restored_state).unwrap();

        assert_eq!(kind, OptimizerKind::Adam);
        assert_eq!(restored_state.step_count, 1);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&net.flat_params()), bits(&restored.flat_params()));
        assert_eq!(net.norm_stats(), restored.norm_stats());
        for (a, b) in state.second.iter().zip(&restored_state.second) {
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut net = small_resnet(1);
        let mut bytes = to_bytes(&mut net, None);
        bytes[0] = b'X';
        assert!(matches!(parse(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_format_error_not_panic() {
        let mut net = small_resnet(1);
        let bytes = to_bytes(&mut net, None);
        for cut in [0, 4, 9, 11, 40, bytes.len() - 3] {
            assert!(matches!(parse(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn architecture_mismatch_is_consistency_error() {
        let mut net = small_resnet(1);
        let bytes = to_bytes(&mut net, None);
        let ckpt = parse(&bytes).unwrap();
        let cfg = ModelConfig {
            kind: ModelKind::Mlp,
            width_w: 1,
            depth_d: 1,
            num_classes: 3,
            input_shape: [1, 16, 16],
            hidden_sizes: vec![8],
        };
        let mut other = Network::<f32>::build(cfg, 0).unwrap();
        assert!(matches!(
            ckpt.apply_to(&mut other),
            Err(Error::Consistency(_))
        ));
    }
}
