use crate::collective::{decode_update_prefix, encode_update};
use crate::data::{partition, Dataset, Partition};
use crate::error::{Error, Result};
use crate::storage::BlobStore;

pub const MANIFEST_KEY: &str = "manifest";

pub fn partition_key(rank: usize) -> String {
    format!("part/{rank}")
}

/// What the starter hands each worker it launches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerHandle {
    pub rank: usize,
    pub partition: Partition,
    pub partition_key: String,
}

/// Splits `data` into `n_workers` row ranges, uploads each as `part/{rank}` and writes
/// the newline-separated list of partition keys under `manifest`.
pub fn starter(data: &Dataset, n_workers: usize, store: &dyn BlobStore) -> Result<Vec<WorkerHandle>> {
    let parts = partition(data.n_rows(), n_workers)?;
    let mut handles = Vec::with_capacity(parts.len());
    for p in parts {
        let key = partition_key(p.owner);
        store.put(&key, &encode_partition(&data.slice(p.rows.clone())))?;
        handles.push(WorkerHandle {
            rank: p.owner,
            partition: p,
            partition_key: key,
        });
    }
    let manifest: Vec<&str> = handles.iter().map(|h| h.partition_key.as_str()).collect();
    store.put(MANIFEST_KEY, manifest.join("\n").as_bytes())?;
    Ok(handles)
}

/// Reads the partition keys back from the manifest.
pub fn read_manifest(store: &dyn BlobStore) -> Result<Vec<String>> {
    let bytes = store
        .get(MANIFEST_KEY)?
        .ok_or_else(|| Error::Format("manifest missing".into()))?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Format(format!("manifest is not UTF-8: {e}")))?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// Features then labels as two update blobs; the first blob's weight holds `d`.
pub fn encode_partition(data: &Dataset) -> Vec<u8> {
    let mut out = encode_update(data.features(), data.n_features() as f64);
    out.extend_from_slice(&encode_update(data.labels(), 0.0));
    out
}

pub fn decode_partition(bytes: &[u8]) -> Result<Dataset> {
    let (features, d, used) = decode_update_prefix(bytes)?;
    let (labels, _, rest) = decode_update_prefix(&bytes[used..])?;
    if used + rest != bytes.len() {
        return Err(Error::Format("trailing bytes after partition".into()));
    }
    if !(d >= 1.0 && d.fract() == 0.0) {
        return Err(Error::Format(format!("bad feature count {d} in partition")));
    }
    Dataset::new(features.into_inner(), labels.into_inner(), d as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, Task};
    use crate::storage::MemStore;

    #[test]
    fn three_workers_get_disjoint_partitions() {
        let ds = generate_synthetic(10, 3, Task::Classification, 1).unwrap();
        let store = MemStore::new();
        let handles = starter(&ds, 3, &store).unwrap();
        assert_eq!(handles.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(read_manifest(&store).unwrap(), vec!["part/0", "part/1", "part/2"]);
        let mut rows = 0;
        for h in &handles {
            let part = decode_partition(&store.get(&h.partition_key).unwrap().unwrap()).unwrap();
            assert_eq!(part, ds.slice(h.partition.rows.clone()));
            assert_eq!(h.partition.rows.start, rows);
            rows = h.partition.rows.end;
        }
        assert_eq!(rows, 10);
    }
}
