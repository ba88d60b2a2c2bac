//! Binary dataset format.
//!
//! A 32-byte little-endian header followed by `K * M * d_a` little-endian
//! `f64` gross returns in `[path][period][asset]` order:
//!
//! | offset | size | field                   |
//! |--------|------|-------------------------|
//! | 0      | 4    | magic `KSCN`            |
//! | 4      | 2    | format version (1)      |
//! | 6      | 2    | `d_a`                   |
//! | 8      | 4    | `M`                     |
//! | 12     | 4    | `K`                     |
//! | 16     | 8    | RNG seed                |
//! | 24     | 8    | market/grid fingerprint |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::ScenarioSet;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"KSCN";
pub const HEADER_LEN: usize = 32;
const VERSION: u16 = 1;

pub fn save_dataset(set: &ScenarioSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..6].copy_from_slice(&VERSION.to_le_bytes());
    header[6..8].copy_from_slice(&u16::try_from(set.assets()).map_err(dim_err)?.to_le_bytes());
    header[8..12].copy_from_slice(&u32::try_from(set.periods()).map_err(dim_err)?.to_le_bytes());
    header[12..16].copy_from_slice(&u32::try_from(set.paths()).map_err(dim_err)?.to_le_bytes());
    header[16..24].copy_from_slice(&set.seed().to_le_bytes());
    header[24..32].copy_from_slice(&set.params_fingerprint().to_le_bytes());
    w.write_all(&header)?;
    for v in set.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn dim_err<E>(_: E) -> Error {
    Error::DimensionMismatch("dimension does not fit the header field".into())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ScenarioSet> {
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("file shorter than the 32-byte header".into()))?;
    if header[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            &header[0..4],
            MAGIC
        )));
    }
    let version = u16::from_le_bytes(header[4..6].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let assets = u16::from_le_bytes(header[6..8].try_into().unwrap()) as usize;
    let periods = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let paths = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let fingerprint = u64::from_le_bytes(header[24..32].try_into().unwrap());
    if assets == 0 || periods == 0 || paths == 0 {
        return Err(Error::DimensionMismatch(format!(
            "header declares K={paths}, M={periods}, d_a={assets}"
        )));
    }

    let count = paths * periods * assets;
    let expected = count as u64 * 8;
    let found = file_len.saturating_sub(HEADER_LEN as u64);
    if found < expected {
        return Err(Error::Truncated { expected, found });
    }
    if found > expected {
        return Err(Error::DimensionMismatch(format!(
            "{found} bytes of path data, header implies {expected}"
        )));
    }

    let mut data = Vec::new();
    data.try_reserve_exact(count)
        .map_err(|_| Error::Allocation { bytes: count * 8 })?;
    let mut buf = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    ScenarioSet::from_parts(paths, periods, assets, seed, fingerprint, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{generate_dataset, KouParams, TimeGrid};

    fn small_set() -> ScenarioSet {
        generate_dataset(
            &KouParams::calibrated(),
            &TimeGrid::new(3.0, 3).unwrap(),
            10,
            5,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        let set = small_set();
        save_dataset(&set, &path).unwrap();
        assert_eq!(
            std::fs::metadata(&path).unwrap().len(),
            (HEADER_LEN + 10 * 3 * 2 * 8) as u64
        );
        assert_eq!(load_dataset(&path).unwrap(), set);
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&small_set(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Format(_))));
    }

    #[test]
    fn missing_path_is_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&small_set(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // header says K=10, body holds 9 paths
        std::fs::write(&path, &bytes[..HEADER_LEN + 9 * 3 * 2 * 8]).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&small_set(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 8]);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::DimensionMismatch(_))
        ));
    }
}
