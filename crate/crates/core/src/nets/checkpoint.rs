//! Checkpoint files: `KCKP`, a little-endian `u32` header length, a JSON
//! header, then `f64` little-endian payload
//! `theta_q | theta_p | xi | adam m | adam v`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, Architecture, NetworkParams, PolicyPair};
use crate::recursion::ConstraintSpec;
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"KCKP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub q_arch: Architecture,
    pub p_arch: Architecture,
    pub constraints: ConstraintSpec<f64>,
    pub wealth_scale: f64,
    pub horizon: f64,
    pub seed: u64,
    pub iteration: u64,
    pub adam_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: PolicyPair<f64>,
    pub xi: f64,
    pub adam: AdamState<f64>,
    pub seed: u64,
    pub iteration: u64,
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let header = CheckpointHeader {
        q_arch: *ck.policy.q_net.arch(),
        p_arch: *ck.policy.p_net.arch(),
        constraints: ck.policy.constraints,
        wealth_scale: ck.policy.wealth_scale,
        horizon: ck.policy.horizon,
        seed: ck.seed,
        iteration: ck.iteration,
        adam_step: ck.adam.step,
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let payload = ck
        .policy
        .q_net
        .theta()
        .iter()
        .chain(ck.policy.p_net.theta())
        .chain(std::iter::once(&ck.xi))
        .chain(&ck.adam.m)
        .chain(&ck.adam.v);
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file too short".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut json)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let h: CheckpointHeader = serde_json::from_slice(&json)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let nq = h.q_arch.param_count();
    let np = h.p_arch.param_count();
    let n = nq + np + 1;
    if rest.len() != 8 * 3 * n {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, expected {}",
            rest.len(),
            24 * n
        )));
    }
    let vals: Vec<f64> = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let policy = PolicyPair::new(
        NetworkParams::from_flat(h.q_arch, vals[..nq].to_vec())?,
        NetworkParams::from_flat(h.p_arch, vals[nq..nq + np].to_vec())?,
        h.constraints,
        h.wealth_scale,
        h.horizon,
    )?;
    let adam = AdamState {
        m: vals[n..2 * n].to_vec(),
        v: vals[2 * n..3 * n].to_vec(),
        step: h.adam_step,
        n_params: nq + np,
    };
    Ok(Checkpoint {
        policy,
        xi: vals[n - 1],
        adam,
        seed: h.seed,
        iteration: h.iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cs = ConstraintSpec::new(35.0, 60.0, 2).unwrap();
        let policy = PolicyPair::init(2, 5, cs, 1000.0, 30.0, &mut rng).unwrap();
        let n = policy.param_count() + 1;
        let mut adam = AdamState::new(n, n - 1);
        adam.m[3] = 0.25;
        adam.v[n - 1] = 7.0;
        adam.step = 12;
        let ck = Checkpoint {
            policy,
            xi: 129.5,
            adam,
            seed: 77,
            iteration: 12,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.bin");
        save_checkpoint(&ck, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), ck);

        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 8);
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
    }
}
