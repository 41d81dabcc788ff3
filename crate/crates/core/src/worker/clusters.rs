use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{ClusterId, WorkerError};
use crate::write_atomic;

/// job id → cluster ids, one per run, persisted as `clusters.tsv` with
/// lines `job_id<TAB>run_index<TAB>cluster_id`.
#[derive(Debug)]
pub struct ClusterMap {
    path: PathBuf,
    jobs: BTreeMap<String, Vec<ClusterId>>,
}

impl ClusterMap {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, WorkerError> {
        let path = path.into();
        let mut jobs: BTreeMap<String, Vec<(usize, ClusterId)>> = BTreeMap::new();
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                for (n, line) in text.lines().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let corrupt =
                        || WorkerError::Corrupt(format!("{}:{}: `{line}`", path.display(), n + 1));
                    let mut f = line.split('\t');
                    let (Some(job), Some(run), Some(cluster), None) =
                        (f.next(), f.next(), f.next(), f.next())
                    else {
                        return Err(corrupt());
                    };
                    let run: usize = run.parse().map_err(|_| corrupt())?;
                    let cluster: ClusterId = cluster.parse().map_err(|_| corrupt())?;
                    jobs.entry(job.to_owned()).or_default().push((run, cluster));
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        let jobs = jobs
            .into_iter()
            .map(|(job, mut runs)| {
                runs.sort();
                (job, runs.into_iter().map(|(_, c)| c).collect())
            })
            .collect();
        Ok(ClusterMap { path, jobs })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, job_id: &str) -> Option<&[ClusterId]> {
        self.jobs.get(job_id).map(Vec::as_slice)
    }

    pub fn contains(&self, job_id: &str) -> bool {
        self.jobs.contains_key(job_id)
    }

    pub fn job_ids(&self) -> impl Iterator<Item = &str> {
        self.jobs.keys().map(String::as_str)
    }

    pub fn max_cluster_id(&self) -> ClusterId {
        self.jobs.values().flatten().copied().max().unwrap_or(0)
    }

    pub fn insert(&mut self, job_id: &str, clusters: Vec<ClusterId>) -> Result<(), WorkerError> {
        self.jobs.insert(job_id.to_owned(), clusters);
        self.save()
    }

    pub fn remove(&mut self, job_id: &str) -> Result<(), WorkerError> {
        if self.jobs.remove(job_id).is_some() {
            self.save()?;
        }
        Ok(())
    }

    fn save(&self) -> Result<(), WorkerError> {
        let mut text = String::new();
        for (job, clusters) in &self.jobs {
            for (i, c) in clusters.iter().enumerate() {
                text.push_str(&format!("{job}\t{i}\t{c}\n"));
            }
        }
        write_atomic(&self.path, text.as_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_and_reloads() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("clusters.tsv");
        let mut m = ClusterMap::open(&path).unwrap();
        m.insert("J-w1-2", vec![7, 8]).unwrap();
        m.insert("J-w1-1", vec![5]).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "J-w1-1\t0\t5\nJ-w1-2\t0\t7\nJ-w1-2\t1\t8\n"
        );
        let m2 = ClusterMap::open(&path).unwrap();
        assert_eq!(m2.get("J-w1-2"), Some(&[7, 8][..]));
        assert_eq!(m2.max_cluster_id(), 8);
        let mut m3 = m2;
        m3.remove("J-w1-2").unwrap();
        assert_eq!(ClusterMap::open(&path).unwrap().get("J-w1-2"), None);
    }

    #[test]
    fn corrupt_line() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("clusters.tsv");
        std::fs::write(&path, "J-a-1\tzero\t3\n").unwrap();
        assert!(matches!(
            ClusterMap::open(&path),
            Err(WorkerError::Corrupt(_))
        ));
    }
}
