//! Per-checkpoint replay record files.
//!
//! Layout (all integers little-endian):
//!
//! | offset | size | field |
//! |--------|------|-------|
//! | 0 | 4 | magic `RPLG` |
//! | 4 | 2 | format version (`1`) |
//! | 6 | 2 | game name length `L` |
//! | 8 | L | game name, UTF-8 |
//! | 8+L | 2 | run id |
//! | 10+L | 2 | checkpoint id |
//! | 12+L | 8 | transition count `N` |
//! | 20+L | N·7056 | frames, row-major 84×84 bytes each |
//! | … | N | actions, one byte each |
//! | … | 4N | rewards, `f32` |
//! | … | N | terminal flags, `0` or `1` |
//!
//! Files live at `<root>/<game>/run_<r>/checkpoint_<c>.rplg`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use super::{ACTION_COUNT, FRAME_LEN};
use crate::{Error, Result};

pub const REPLAY_MAGIC: [u8; 4] = *b"RPLG";
pub const REPLAY_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplayLogHeader {
    pub game: String,
    pub run: u16,
    pub checkpoint: u16,
    pub count: u64,
}

impl ReplayLogHeader {
    fn byte_len(&self) -> u64 {
        20 + self.game.len() as u64
    }
}

/// In-memory contents of one replay record file (possibly a prefix of it).
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayLog {
    pub game: String,
    pub run: u16,
    pub checkpoint: u16,
    pub frames: Vec<u8>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    pub terminals: Vec<bool>,
}

pub fn log_path(root: &Path, game: &str, run: u16, checkpoint: u16) -> PathBuf {
    root.join(game).join(format!("run_{run}")).join(format!("checkpoint_{checkpoint}.rplg"))
}

fn bad(path: &Path, reason: impl Into<String>) -> Error {
    Error::ReplayFormat { path: path.to_path_buf(), reason: reason.into() }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::io(path, e))
}

fn read_u16(r: &mut impl Read, path: &Path) -> Result<u16> {
    let mut b = [0u8; 2];
    read_exact(r, &mut b, path)?;
    Ok(u16::from_le_bytes(b))
}

impl ReplayLog {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        &self.frames[i * FRAME_LEN..(i + 1) * FRAME_LEN]
    }

    pub fn header(&self) -> ReplayLogHeader {
        ReplayLogHeader { game: self.game.clone(), run: self.run, checkpoint: self.checkpoint, count: self.len() as u64 }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let n = self.actions.len();
        if self.frames.len() != n * FRAME_LEN || self.rewards.len() != n || self.terminals.len() != n {
            return Err("parallel arrays disagree in length".into());
        }
        if let Some(a) = self.actions.iter().find(|&&a| a as usize >= ACTION_COUNT) {
            return Err(format!("action {a} outside [0, {ACTION_COUNT})"));
        }
        if self.game.len() > u16::MAX as usize {
            return Err("game name too long".into());
        }
        Ok(())
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        self.validate().map_err(|r| bad(path, r))?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(&REPLAY_MAGIC).map_err(io)?;
        w.write_all(&REPLAY_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.game.len() as u16).to_le_bytes()).map_err(io)?;
        w.write_all(self.game.as_bytes()).map_err(io)?;
        w.write_all(&self.run.to_le_bytes()).map_err(io)?;
        w.write_all(&self.checkpoint.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.frames).map_err(io)?;
        w.write_all(&self.actions).map_err(io)?;
        for r in &self.rewards {
            w.write_all(&r.to_le_bytes()).map_err(io)?;
        }
        let flags: Vec<u8> = self.terminals.iter().map(|&t| t as u8).collect();
        w.write_all(&flags).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read_header(path: &Path) -> Result<ReplayLogHeader> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        Self::parse_header(&mut r, path)
    }

    fn parse_header(r: &mut impl Read, path: &Path) -> Result<ReplayLogHeader> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic, path)?;
        if magic != REPLAY_MAGIC {
            return Err(bad(path, "bad magic"));
        }
        let version = read_u16(r, path)?;
        if version != REPLAY_VERSION {
            return Err(bad(path, format!("unsupported version {version}")));
        }
        let name_len = read_u16(r, path)? as usize;
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name, path)?;
        let game = String::from_utf8(name).map_err(|_| bad(path, "game name is not UTF-8"))?;
        let run = read_u16(r, path)?;
        let checkpoint = read_u16(r, path)?;
        let mut count = [0u8; 8];
        read_exact(r, &mut count, path)?;
        Ok(ReplayLogHeader { game, run, checkpoint, count: u64::from_le_bytes(count) })
    }

    /// Reads the first `n` transitions (all of them when `n` is `None`).
    pub fn read_prefix(path: &Path, n: Option<u64>) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let header = Self::parse_header(&mut r, path)?;
        let n = n.unwrap_or(header.count);
        if n > header.count {
            return Err(bad(path, format!("requested {n} transitions, file holds {}", header.count)));
        }
        let count = header.count;
        let base = header.byte_len();
        let nu = n as usize;
        let io = |e| Error::io(path, e);

        let mut frames = vec![0u8; nu * FRAME_LEN];
        read_exact(&mut r, &mut frames, path)?;

        let actions_off = base + count * FRAME_LEN as u64;
        r.seek(SeekFrom::Start(actions_off)).map_err(io)?;
        let mut actions = vec![0u8; nu];
        read_exact(&mut r, &mut actions, path)?;

        r.seek(SeekFrom::Start(actions_off + count)).map_err(io)?;
        let mut raw = vec![0u8; nu * 4];
        read_exact(&mut r, &mut raw, path)?;
        let rewards = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();

        r.seek(SeekFrom::Start(actions_off + count * 5)).map_err(io)?;
        let mut flags = vec![0u8; nu];
        read_exact(&mut r, &mut flags, path)?;
        let terminals = flags
            .into_iter()
            .map(|f| match f {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(bad(path, format!("terminal flag {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;

        let log = ReplayLog { game: header.game, run: header.run, checkpoint: header.checkpoint, frames, actions, rewards, terminals };
        log.validate().map_err(|reason| bad(path, reason))?;
        Ok(log)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_log(n: usize) -> ReplayLog {
        ReplayLog {
            game: "Breakout".into(),
            run: 2,
            checkpoint: 7,
            frames: (0..n * FRAME_LEN).map(|i| (i % 251) as u8).collect(),
            actions: (0..n).map(|i| (i % 18) as u8).collect(),
            rewards: (0..n).map(|i| i as f32 * 0.5 - 1.0).collect(),
            terminals: (0..n).map(|i| i % 4 == 3).collect(),
        }
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rplg");
        sample_log(3).write_to(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"RPLG");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[8, 0]);
        assert_eq!(&bytes[8..16], b"Breakout");
        assert_eq!(&bytes[16..18], &[2, 0]);
        assert_eq!(&bytes[18..20], &[7, 0]);
        assert_eq!(&bytes[20..28], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 28 + 3 * FRAME_LEN + 3 + 12 + 3);
    }

    #[test]
    fn prefix_read_matches_written_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.rplg");
        let log = sample_log(9);
        log.write_to(&path).unwrap();
        assert_eq!(ReplayLog::read_prefix(&path, None).unwrap(), log);
        let p = ReplayLog::read_prefix(&path, Some(4)).unwrap();
        assert_eq!(p.actions, log.actions[..4]);
        assert_eq!(p.rewards, log.rewards[..4]);
        assert_eq!(p.terminals, log.terminals[..4]);
        assert_eq!(p.frames, log.frames[..4 * FRAME_LEN]);
        assert!(ReplayLog::read_prefix(&path, Some(10)).is_err());
    }

    #[test]
    fn rejects_out_of_range_actions_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = sample_log(2);
        log.actions[1] = 18;
        assert!(log.write_to(&dir.path().join("a.rplg")).is_err());
        let p = dir.path().join("b.rplg");
        std::fs::write(&p, b"NOPE\x01\x00").unwrap();
        assert!(matches!(ReplayLog::read_header(&p), Err(Error::ReplayFormat { .. })));
    }
}
