//! Packing records into capped tar shards and streaming them back with a
//! bounded shuffle buffer.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::sync::mpsc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tarfile::{TarReader, TarWriter};
use super::{ManifestRow, ShardRecord, ShardSet, Split, SHARD_CAP};
use crate::error::{Result, T3Error};
use crate::rng::rng_from;

/// Pack records into `{split}-{index:06}.tar` archives of at most
/// [`SHARD_CAP`] records, each record stored as `{key}.jpg` then
/// `{key}.json`, and write the manifest. Payload bytes roundtrip exactly.
pub fn pack_shards(records: &[ShardRecord], out_dir: &Path, split: Split) -> Result<ShardSet> {
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if !seen.insert(&r.key) {
            return Err(T3Error::Config(format!("duplicate record key '{}'", r.key)));
        }
        r.labels()?.validate()?;
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| T3Error::Io(format!("cannot create {}: {e}", out_dir.display())))?;

    let mut rows = Vec::new();
    for (index, chunk) in records.chunks(SHARD_CAP).enumerate() {
        let name = format!("{}-{index:06}.tar", split.tag());
        let path = out_dir.join(&name);
        let write = || -> Result<()> {
            let file = File::create(&path)
                .map_err(|e| T3Error::Io(format!("cannot create {}: {e}", path.display())))?;
            let mut tar = TarWriter::new(BufWriter::new(file));
            for r in chunk {
                tar.append(&format!("{}.jpg", r.key), &r.image_bytes)?;
                tar.append(&format!("{}.json", r.key), &r.label_json)?;
            }
            tar.finish()?;
            Ok(())
        };
        if let Err(e) = write() {
            // do not leave a truncated shard behind
            let _ = std::fs::remove_file(&path);
            return Err(e);
        }
        let mut pairings: BTreeMap<String, usize> = BTreeMap::new();
        for r in chunk {
            *pairings.entry(r.labels()?.sensor_id).or_insert(0) += 1;
        }
        rows.push(ManifestRow {
            archive: name,
            records: chunk.len(),
            pairings,
        });
    }

    let manifest_path = ShardSet::manifest_path(out_dir, split);
    let mut text = String::new();
    for row in &rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    std::fs::write(&manifest_path, text)
        .map_err(|e| T3Error::Io(format!("cannot write {}: {e}", manifest_path.display())))?;

    Ok(ShardSet {
        dir: out_dir.to_path_buf(),
        split,
        rows,
    })
}

fn record_from_members(
    jpg: Option<(String, Vec<u8>)>,
    json: (String, Vec<u8>),
) -> Option<ShardRecord> {
    let (jpg_name, image_bytes) = jpg?;
    let key = jpg_name.strip_suffix(".jpg")?.to_string();
    let json_key = json.0.strip_suffix(".json")?;
    if json_key != key {
        return None;
    }
    Some(ShardRecord {
        key,
        image_bytes,
        label_json: json.1,
    })
}

/// Streaming iterator over a shard set with a bounded shuffle buffer.
/// Corrupt members are skipped and counted; `shuffle_buffer = 1` preserves
/// archive order.
pub struct ShardStream {
    source: Box<dyn Iterator<Item = ShardRecord> + Send>,
    buffer: Vec<ShardRecord>,
    capacity: usize,
    rng: ChaCha8Rng,
    skipped: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl ShardStream {
    /// Members skipped so far because of archive corruption.
    pub fn skipped(&self) -> usize {
        self.skipped.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl Iterator for ShardStream {
    type Item = ShardRecord;

    fn next(&mut self) -> Option<ShardRecord> {
        loop {
            match self.source.next() {
                Some(rec) => {
                    if self.buffer.len() < self.capacity {
                        self.buffer.push(rec);
                        continue;
                    }
                    let j = self.rng.gen_range(0..self.buffer.len());
                    return Some(std::mem::replace(&mut self.buffer[j], rec));
                }
                None => {
                    if self.buffer.is_empty() {
                        return None;
                    }
                    let j = self.rng.gen_range(0..self.buffer.len());
                    return Some(self.buffer.swap_remove(j));
                }
            }
        }
    }
}

struct ArchiveRecords {
    paths: std::vec::IntoIter<std::path::PathBuf>,
    current: Option<(TarReader<BufReader<File>>, Option<(String, Vec<u8>)>)>,
    skipped: std::sync::Arc<std::sync::atomic::AtomicUsize>,
}

impl Iterator for ArchiveRecords {
    type Item = ShardRecord;

    fn next(&mut self) -> Option<ShardRecord> {
        loop {
            if self.current.is_none() {
                let path = self.paths.next()?;
                match File::open(&path) {
                    Ok(f) => {
                        self.current = Some((TarReader::new(BufReader::new(f)), None));
                    }
                    Err(_) => {
                        self.skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        continue;
                    }
                }
            }
            let (reader, pending) = self.current.as_mut().unwrap();
            match reader.next() {
                Some(Ok(member)) => {
                    if member.0.ends_with(".jpg") {
                        if pending.replace(member).is_some() {
                            // jpg without its json partner
                            self.skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        }
                    } else if member.0.ends_with(".json") {
                        let jpg = pending.take();
                        match record_from_members(jpg, member) {
                            Some(rec) => return Some(rec),
                            None => {
                                self.skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            }
                        }
                    } else {
                        self.skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                }
                Some(Err(_)) => {
                    // unreadable header: skip the rest of this archive
                    self.skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    self.current = None;
                }
                None => {
                    if pending.take().is_some() {
                        self.skipped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    }
                    self.current = None;
                }
            }
        }
    }
}

/// Stream with a single reader thread (fully deterministic for a fixed seed).
pub fn stream_shards(set: &ShardSet, shuffle_buffer: usize, seed: u64) -> ShardStream {
    let skipped = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let source = ArchiveRecords {
        paths: set.archive_paths().into_iter(),
        current: None,
        skipped: skipped.clone(),
    };
    ShardStream {
        source: Box::new(source),
        buffer: Vec::new(),
        capacity: shuffle_buffer.max(1),
        rng: rng_from(seed, "shuffle"),
        skipped,
    }
}

/// Stream with `readers` parallel archive readers feeding a bounded queue.
/// Record arrival order depends on thread scheduling, so determinism is only
/// guaranteed with one reader.
pub fn stream_shards_parallel(
    set: &ShardSet,
    shuffle_buffer: usize,
    seed: u64,
    readers: usize,
    prefetch: usize,
) -> ShardStream {
    if readers <= 1 {
        return stream_shards(set, shuffle_buffer, seed);
    }
    let skipped = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
    let (tx, rx) = mpsc::sync_channel::<ShardRecord>(prefetch.max(1));
    let paths = set.archive_paths();
    for r in 0..readers {
        let tx = tx.clone();
        let skipped = skipped.clone();
        let my_paths: Vec<_> = paths
            .iter()
            .enumerate()
            .filter(|(i, _)| i % readers == r)
            .map(|(_, p)| p.clone())
            .collect();
        std::thread::spawn(move || {
            let source = ArchiveRecords {
                paths: my_paths.into_iter(),
                current: None,
                skipped,
            };
            for rec in source {
                if tx.send(rec).is_err() {
                    break;
                }
            }
        });
    }
    drop(tx);
    ShardStream {
        source: Box::new(rx.into_iter()),
        buffer: Vec::new(),
        capacity: shuffle_buffer.max(1),
        rng: rng_from(seed, "shuffle"),
        skipped,
    }
}
