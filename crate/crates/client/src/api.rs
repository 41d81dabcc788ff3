//! Typed wrappers over the node methods.

use gridlet_core::broker::{Leadership, PeerInfo};
use gridlet_core::rpc::{RpcValue, ValueError};
use gridlet_core::worker::{FileEntry, GrepMatch, JobRequest, JobStatus, OutputFile};

use crate::rpc::{ClientError, RpcClient};

/// Answer of `broker.role`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleInfo {
    pub peer_id: String,
    /// `leader`, `standby` or `worker`.
    pub role: String,
    pub leadership: Leadership,
}

impl RoleInfo {
    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("peer_id", RpcValue::from(self.peer_id.as_str())),
            ("role", RpcValue::from(self.role.as_str())),
            ("epoch", RpcValue::Int(self.leadership.epoch as i32)),
            (
                "leader_url",
                RpcValue::from(self.leadership.leader_url.as_str()),
            ),
            (
                "leader_id",
                RpcValue::from(self.leadership.leader_id.as_str()),
            ),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let epoch = v.member("epoch")?.as_i32()?;
        Ok(RoleInfo {
            peer_id: v.member("peer_id")?.as_str()?.to_owned(),
            role: v.member("role")?.as_str()?.to_owned(),
            leadership: Leadership {
                epoch: u32::try_from(epoch)
                    .map_err(|_| ValueError(format!("negative epoch {epoch}")))?,
                leader_url: v.member("leader_url")?.as_str()?.to_owned(),
                leader_id: v.member("leader_id")?.as_str()?.to_owned(),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AclRow {
    pub id: i32,
    pub kind: String,
    pub effect: String,
    pub principal: String,
    pub scope: String,
}

impl AclRow {
    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let s = |k: &str| -> Result<String, ValueError> { Ok(v.member(k)?.as_str()?.to_owned()) };
        Ok(AclRow {
            id: v.member("id")?.as_i32()?,
            kind: s("kind")?,
            effect: s("effect")?,
            principal: s("principal")?,
            scope: s("scope")?,
        })
    }
}

fn list<T>(
    v: &RpcValue,
    f: impl Fn(&RpcValue) -> Result<T, ValueError>,
) -> Result<Vec<T>, ClientError> {
    Ok(v.as_array()?.iter().map(f).collect::<Result<_, _>>()?)
}

fn s(v: &str) -> RpcValue {
    RpcValue::from(v)
}

/// Clamps a byte count into the i4 range used on the wire.
fn i4(v: u64) -> RpcValue {
    RpcValue::Int(i32::try_from(v).unwrap_or(i32::MAX))
}

impl RpcClient {
    pub async fn login(&self, credential: &[u8]) -> Result<String, ClientError> {
        let v = self
            .call("auth.login", vec![RpcValue::Base64(credential.to_vec())])
            .await?;
        Ok(v.as_str()?.to_owned())
    }

    pub async fn acl_add(
        &self,
        kind: &str,
        effect: &str,
        principal: &str,
        scope: &str,
    ) -> Result<i32, ClientError> {
        let v = self
            .call("acl.add", vec![s(kind), s(effect), s(principal), s(scope)])
            .await?;
        Ok(v.as_i32()?)
    }

    pub async fn acl_remove(&self, id: i32) -> Result<(), ClientError> {
        self.call("acl.remove", vec![RpcValue::Int(id)]).await?;
        Ok(())
    }

    pub async fn acl_list(&self) -> Result<Vec<AclRow>, ClientError> {
        list(&self.call("acl.list", vec![]).await?, AclRow::from_rpc)
    }

    pub async fn peer_register(
        &self,
        peer_id: &str,
        url: &str,
    ) -> Result<Vec<PeerInfo>, ClientError> {
        list(
            &self.call("peer.register", vec![s(peer_id), s(url)]).await?,
            PeerInfo::from_rpc,
        )
    }

    pub async fn peer_list(&self) -> Result<Vec<PeerInfo>, ClientError> {
        list(&self.call("peer.list", vec![]).await?, PeerInfo::from_rpc)
    }

    pub async fn broker_role(&self) -> Result<RoleInfo, ClientError> {
        Ok(RoleInfo::from_rpc(
            &self.call("broker.role", vec![]).await?,
        )?)
    }

    pub async fn job_submit(&self, request: &JobRequest) -> Result<String, ClientError> {
        let params = vec![
            s(&request.job_name),
            RpcValue::Base64(request.executable.clone()),
            RpcValue::Base64(request.submit_file.clone()),
            s(&request.submit_file_name),
            RpcValue::Array(request.input_file_names.iter().map(|n| s(n)).collect()),
        ];
        Ok(self.call("job.submit", params).await?.as_str()?.to_owned())
    }

    pub async fn job_status(&self, job_id: &str) -> Result<JobStatus, ClientError> {
        Ok(JobStatus::from_rpc(
            &self.call("job.status", vec![s(job_id)]).await?,
        )?)
    }

    pub async fn job_kill(&self, job_id: &str) -> Result<(), ClientError> {
        self.call("job.kill", vec![s(job_id)]).await?;
        Ok(())
    }

    pub async fn job_purge(&self, job_id: &str) -> Result<(), ClientError> {
        self.call("job.purge", vec![s(job_id)]).await?;
        Ok(())
    }

    pub async fn job_outputs(&self, job_id: &str) -> Result<Vec<Vec<OutputFile>>, ClientError> {
        let v = self.call("job.outputs", vec![s(job_id)]).await?;
        v.as_array()?
            .iter()
            .map(|run| list(run, OutputFile::from_rpc))
            .collect()
    }

    pub async fn job_fetch(
        &self,
        job_id: &str,
        run: u32,
        name: &str,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, ClientError> {
        let params = vec![
            s(job_id),
            i4(u64::from(run)),
            s(name),
            i4(offset),
            i4(length),
        ];
        self.call_binary("job.fetch", params).await
    }

    pub async fn file_ls(&self, path: &str, pattern: &str) -> Result<Vec<FileEntry>, ClientError> {
        list(
            &self.call("file.ls", vec![s(path), s(pattern)]).await?,
            FileEntry::from_rpc,
        )
    }

    pub async fn file_read(
        &self,
        path: &str,
        offset: u64,
        length: u64,
    ) -> Result<Vec<u8>, ClientError> {
        self.call_binary("file.read", vec![s(path), i4(offset), i4(length)])
            .await
    }

    pub async fn file_md5(&self, path: &str) -> Result<String, ClientError> {
        Ok(self
            .call("file.md5", vec![s(path)])
            .await?
            .as_str()?
            .to_owned())
    }

    pub async fn file_grep(
        &self,
        path: &str,
        pattern: &str,
    ) -> Result<Vec<GrepMatch>, ClientError> {
        list(
            &self.call("file.grep", vec![s(path), s(pattern)]).await?,
            GrepMatch::from_rpc,
        )
    }
}
