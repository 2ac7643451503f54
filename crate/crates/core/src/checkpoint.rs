//! Checkpoint container.
//!
//! ```text
//! PCSCKPT 1
//! meta <key> <json>
//! tensor <name> <d0,d1,...> <offset> <count>
//! end
//! <little-endian f32 payload>
//! ```
//!
//! Offsets and counts are in elements. Meta keys and tensors keep insertion
//! order, so identical models produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::compaction::{CompactLayerMeta, CompactNetwork, ScaleMode};
use crate::error::{Error, Result};
use crate::network::{ArchSpec, Network};
use crate::nn::State;
use crate::shrinking::SalienceState;
use crate::tensor::Tensor;

const MAGIC: &str = "PCSCKPT 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, serde_json::Value)>,
    pub tensors: Vec<(String, Tensor)>,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Checkpoint(detail.into())
}

impl Checkpoint {
    pub fn set_meta<T: Serialize>(&mut self, key: &str, value: &T) -> Result<()> {
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(bad(format!("invalid meta key `{key}`")));
        }
        let v = serde_json::to_value(value)?;
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = v,
            None => self.meta.push((key.to_string(), v)),
        }
        Ok(())
    }

    pub fn meta<T: DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| bad(format!("missing meta `{key}`")))?;
        Ok(serde_json::from_value(v)?)
    }

    pub fn push(&mut self, name: &str, t: &Tensor) -> Result<()> {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(bad(format!("invalid tensor name `{name}`")));
        }
        if self.tensors.iter().any(|(n, _)| n == name) {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
        let mut t = t.clone();
        t.grad = None;
        self.tensors.push((name.to_string(), t));
        Ok(())
    }

    pub fn tensor_map(&self) -> BTreeMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = format!("{MAGIC}\n");
        for (k, v) in &self.meta {
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            header.push_str(&format!("tensor {name} {} {offset} {}\n", dims.join(","), t.numel()));
            offset += t.numel();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset * 4);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
        };
        if next_line()? != MAGIC {
            return Err(bad("not a checkpoint (bad magic line)"));
        }
        let mut ckpt = Checkpoint::default();
        let mut entries = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (tag, rest) = line.split_once(' ').ok_or_else(|| bad(format!("malformed header line `{line}`")))?;
            match tag {
                "meta" => {
                    let (k, v) = rest.split_once(' ').ok_or_else(|| bad(format!("malformed meta line `{line}`")))?;
                    ckpt.meta.push((k.to_string(), serde_json::from_str(v)?));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    if f.len() != 4 {
                        return Err(bad(format!("malformed tensor line `{line}`")));
                    }
                    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number `{s}` in `{line}`")));
                    let shape = f[1].split(',').map(parse).collect::<Result<Vec<_>>>()?;
                    entries.push((f[0].to_string(), shape, parse(f[2])?, parse(f[3])?));
                }
                other => return Err(bad(format!("unknown header tag `{other}`"))),
            }
        }
        let payload = &bytes[pos..];
        if !payload.len().is_multiple_of(4) {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut expected = 0;
        for (name, shape, offset, count) in entries {
            if offset != expected || offset + count > values.len() {
                return Err(bad(format!("tensor `{name}` has an inconsistent offset")));
            }
            expected += count;
            let t = Tensor::new(shape, values[offset..offset + count].to_vec())
                .map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            ckpt.tensors.push((name, t));
        }
        if expected != values.len() {
            return Err(bad("trailing payload bytes"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn kind(&self) -> Result<String> {
        self.meta("kind")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PolicyMeta {
    name: String,
    k: usize,
    alpha: f32,
    selection: Vec<usize>,
}

fn restore(state: &mut dyn State, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut err = None;
    state.visit_state_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match tensors.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => err = Some(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", src.shape(), t.shape()))),
            None => err = Some(bad(format!("missing tensor `{name}`"))),
        }
    });
    err.map_or(Ok(()), Err)
}

impl Network {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::default();
        c.set_meta("kind", &"pcs")?;
        c.set_meta("arch", &self.arch)?;
        let policy: Vec<PolicyMeta> = self
            .layers()
            .iter()
            .map(|l| PolicyMeta {
                name: l.name.clone(),
                k: l.state.k,
                alpha: l.state.alpha,
                selection: l.state.last_selection().to_vec(),
            })
            .collect();
        c.set_meta("policy", &policy)?;
        let mut err = None;
        self.visit_state(&mut |n, t| {
            if let Err(e) = c.push(n, t) {
                err.get_or_insert(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        for l in self.layers() {
            let running = Tensor::new(vec![l.state.channels()], l.state.running().to_vec())?;
            c.push(&format!("{}.running", l.name), &running)?;
        }
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind()? != "pcs" {
            return Err(bad(format!("expected a pcs checkpoint, found `{}`", c.kind()?)));
        }
        let arch: ArchSpec = c.meta("arch")?;
        let policy: Vec<PolicyMeta> = c.meta("policy")?;
        // parameters are overwritten below, so the init stream is irrelevant
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = Network::new(arch, &mut rng)?;
        let tensors = c.tensor_map();
        restore(&mut net, &tensors)?;
        let layers = net.layers_mut();
        if layers.len() != policy.len() {
            return Err(bad("policy metadata does not match the architecture"));
        }
        for (l, p) in layers.into_iter().zip(policy) {
            if p.name != l.name {
                return Err(bad(format!("policy for `{}` found where `{}` was expected", p.name, l.name)));
            }
            let running = tensors
                .get(&format!("{}.running", l.name))
                .ok_or_else(|| bad(format!("missing running salience for `{}`", l.name)))?;
            if running.numel() != l.state.channels() || p.selection.iter().any(|&i| i >= l.state.channels()) {
                return Err(bad(format!("salience state of `{}` does not fit the layer", l.name)));
            }
            l.state = SalienceState::from_parts(running.data().to_vec(), p.k, p.alpha, p.selection);
        }
        Ok(net)
    }
}

impl CompactNetwork {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut c = Checkpoint::default();
        c.set_meta("kind", &"compact")?;
        c.set_meta("arch", &self.arch)?;
        c.set_meta("mode", &self.mode)?;
        c.set_meta("layers", &self.meta())?;
        let mut err = None;
        self.visit_state(&mut |n, t| {
            if let Err(e) = c.push(n, t) {
                err.get_or_insert(e);
            }
        });
        err.map_or(Ok(c), Err)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.kind()? != "compact" {
            return Err(bad(format!("expected a compact checkpoint, found `{}`", c.kind()?)));
        }
        let arch: ArchSpec = c.meta("arch")?;
        let mode: ScaleMode = c.meta("mode")?;
        let layers: Vec<CompactLayerMeta> = c.meta("layers")?;
        CompactNetwork::from_parts(arch, mode, &layers, &c.tensor_map())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compaction::{compact_network, plan_for};
    use crate::network::Gate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let mut c = Checkpoint::default();
        c.set_meta("kind", &"test").unwrap();
        c.set_meta("list", &vec![1, 2, 3]).unwrap();
        let odd = Tensor::new(vec![2, 2], vec![f32::MIN_POSITIVE, -0.0, 1e-45, f32::MAX]).unwrap();
        c.push("a", &odd).unwrap();
        c.push("b.c", &Tensor::scalar(0.1)).unwrap();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let a = &back.tensors[0].1;
        for (x, y) in a.data().iter().zip(odd.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(back.meta::<Vec<i32>>("list").unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn rejects_damage() {
        let mut c = Checkpoint::default();
        c.push("a", &Tensor::ones(&[3])).unwrap();
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 2]).is_err());
        assert!(Checkpoint::from_bytes(b"HELLO\nend\n").is_err());
        assert!(c.push("a", &Tensor::ones(&[1])).is_err());
        assert!(c.push("has space", &Tensor::ones(&[1])).is_err());
    }

    #[test]
    fn network_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Network::new(ArchSpec::toy_resnet(3), &mut rng).unwrap();
        for l in net.layers_mut() {
            l.state.k = 2;
            l.state.running_mut()[1] = 0.0;
            l.state.select_topk().unwrap();
        }
        let c = net.to_checkpoint().unwrap();
        let back = Network::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), c.to_bytes());
        for (a, b) in back.layers().iter().zip(net.layers()) {
            assert_eq!(a.state, b.state);
        }
        let x = Tensor::uniform(&[2, 3, 15, 15], -1.0, 1.0, &mut rng);
        assert_eq!(back.predict(&x, Gate::Masked).unwrap(), net.predict(&x, Gate::Masked).unwrap());
        assert!(CompactNetwork::from_checkpoint(&c).is_err());
    }

    #[test]
    fn compact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Network::new(ArchSpec::toy_cnn(3), &mut rng).unwrap();
        for l in net.layers_mut() {
            l.state.running_mut()[0] = 0.0;
        }
        let plan = plan_for(&net, 32, 0.0).unwrap();
        let compact = compact_network(&net, &plan, ScaleMode::Static).unwrap();
        let c = compact.to_checkpoint().unwrap();
        let back = CompactNetwork::from_checkpoint(&Checkpoint::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.to_checkpoint().unwrap().to_bytes(), c.to_bytes());
        let x = Tensor::uniform(&[2, 3, 32, 32], -1.0, 1.0, &mut rng);
        assert_eq!(back.predict(&x).unwrap(), compact.predict(&x).unwrap());
    }
}
