//! Runs "VMs" as sandbox directories with real subprocesses.
//!
//! Each VM handle owns a directory under the driver root. Resource paths such
//! as `/cwb/config` resolve inside it and commands run with it as working
//! directory and `HOME`, under a cleared environment. Output of
//! fire-and-forget processes goes to `cwb/log/` and is handed out by `drain`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::fs::PermissionsExt;
use std::path::{Component, Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant as WallInstant};

use sha2::{Digest, Sha256};

use super::{
    auxiliary_kind, Driver, DriverMessage, ExecMode, ExecOutput, HandleId, HandleStatus, Payload, ProviderError,
    Readiness, ResourceHandle, ResourceKind, SyncReport,
};
use crate::clock::Instant;
use crate::model::{ExecutionId, VmSpec};

const LOG_DIR: &str = "cwb/log";

#[derive(Debug, Clone)]
pub struct LocalDriverConfig {
    pub root: PathBuf,
    pub command_timeout: Duration,
    pub max_payload_bytes: usize,
    /// Value of `PATH` inside the sandbox.
    pub path_env: String,
}

impl LocalDriverConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            command_timeout: Duration::from_secs(600),
            max_payload_bytes: 1 << 30,
            path_env: "/usr/local/bin:/usr/bin:/bin".into(),
        }
    }
}

#[derive(Debug)]
struct Background {
    child: Child,
    log: PathBuf,
    read_to: u64,
    partial: String,
    label: String,
}

#[derive(Debug)]
struct LocalResource {
    handle: ResourceHandle,
    dir: PathBuf,
    procs: Vec<Background>,
}

#[derive(Debug)]
pub struct LocalDriver {
    config: LocalDriverConfig,
    next_handle: u64,
    next_proc: u64,
    resources: BTreeMap<HandleId, LocalResource>,
}

impl LocalDriver {
    pub fn new(config: LocalDriverConfig) -> std::io::Result<Self> {
        fs::create_dir_all(&config.root)?;
        // Continue numbering after sandboxes a previous process left behind.
        let mut next_handle = 0;
        for entry in fs::read_dir(&config.root)? {
            let name = entry?.file_name();
            if let Some(n) = name
                .to_str()
                .and_then(|s| s.strip_prefix("local-"))
                .and_then(|s| s.parse::<u64>().ok())
            {
                next_handle = next_handle.max(n);
            }
        }
        Ok(Self {
            config,
            next_handle,
            next_proc: 0,
            resources: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.config.root
    }

    /// Sandbox directory of a handle.
    pub fn sandbox_dir(&self, handle: &HandleId) -> Option<&Path> {
        self.resources.get(handle).map(|r| r.dir.as_path())
    }

    fn create(&mut self, owner: &ExecutionId, role: &str, kind: ResourceKind) -> Result<ResourceHandle, ProviderError> {
        self.next_handle += 1;
        let id = HandleId(format!("local-{:06}", self.next_handle));
        let dir = self.config.root.join(&id.0);
        if kind != ResourceKind::Address {
            fs::create_dir_all(&dir).map_err(|e| ProviderError::AcquireFailed(format!("{}: {e}", dir.display())))?;
        }
        let endpoint = match kind {
            ResourceKind::Address => "127.0.0.1".to_owned(),
            _ => format!("local:{}", dir.display()),
        };
        let handle = ResourceHandle {
            id: id.clone(),
            provider: "local".into(),
            owner: owner.clone(),
            role: role.to_owned(),
            kind,
            status: HandleStatus::Requested,
            endpoint,
            attached_to: None,
            details: BTreeMap::new(),
        };
        self.resources.insert(
            id,
            LocalResource {
                handle: handle.clone(),
                dir,
                procs: Vec::new(),
            },
        );
        Ok(handle)
    }

    fn live(&mut self, handle: &HandleId) -> Result<&mut LocalResource, ProviderError> {
        let r = self
            .resources
            .get_mut(handle)
            .ok_or_else(|| ProviderError::UnknownHandle(handle.clone()))?;
        match r.handle.status {
            HandleStatus::Released => Err(ProviderError::Released(handle.clone())),
            HandleStatus::Requested => Err(ProviderError::NotReady(handle.clone())),
            HandleStatus::Ready => Ok(r),
        }
    }

    fn command(&self, dir: &Path, command: &str) -> Command {
        let mut c = Command::new("sh");
        c.arg("-c")
            .arg(command)
            .current_dir(dir)
            .env_clear()
            .env("PATH", &self.config.path_env)
            .env("HOME", dir)
            .env("CWB_ROOT", dir)
            .stdin(Stdio::null());
        c
    }
}

/// Resolves a resource path inside `dir`, refusing to escape it.
fn inside(dir: &Path, path: &str) -> Option<PathBuf> {
    let rel = Path::new(path.trim_start_matches('/'));
    if rel.components().any(|c| !matches!(c, Component::Normal(_) | Component::CurDir)) {
        return None;
    }
    Some(dir.join(rel))
}

fn lost(handle: &HandleId, e: impl std::fmt::Display) -> ProviderError {
    ProviderError::ConnectionLost {
        handle: handle.clone(),
        detail: e.to_string(),
    }
}

fn read_pipe<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut s = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut s);
        }
        String::from_utf8_lossy(&s).into_owned()
    })
}

fn is_executable(meta: &fs::Metadata) -> bool {
    meta.permissions().mode() & 0o111 != 0
}

fn hash_tree(h: &mut Sha256, base: &Path, dir: &Path) -> std::io::Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        let rel = path.strip_prefix(base).unwrap_or(&path).to_string_lossy().into_owned();
        if rel == LOG_DIR {
            continue;
        }
        let meta = e.metadata()?;
        if meta.is_dir() {
            h.update(format!("d {rel}\n").as_bytes());
            hash_tree(h, base, &path)?;
        } else {
            let content = fs::read(&path)?;
            h.update(format!("f {rel} {} {}\n", u8::from(is_executable(&meta)), content.len()).as_bytes());
            h.update(&content);
        }
    }
    Ok(())
}

impl Driver for LocalDriver {
    fn id(&self) -> &str {
        "local"
    }

    fn acquire(&mut self, owner: &ExecutionId, spec: &VmSpec, _now: Instant) -> Result<Vec<ResourceHandle>, ProviderError> {
        let mut vm = self.create(owner, &spec.role, ResourceKind::Vm)?;
        for (k, v) in [("instance_type", &spec.instance_type), ("image", &spec.image)] {
            vm.details.insert(k.to_owned(), v.clone());
        }
        let mut out = Vec::new();
        for (key, value) in &spec.extra_resources {
            match auxiliary_kind(key) {
                Some(kind) => {
                    let mut h = self.create(owner, &spec.role, kind)?;
                    h.attached_to = Some(vm.id.clone());
                    h.details.insert(key.clone(), value.scalar_text().unwrap_or_default());
                    self.resources.get_mut(&h.id).expect("just created").handle = h.clone();
                    out.push(h);
                }
                None => {
                    vm.details.insert(key.clone(), value.scalar_text().unwrap_or_default());
                }
            }
        }
        self.resources.get_mut(&vm.id).expect("just created").handle = vm.clone();
        out.insert(0, vm);
        Ok(out)
    }

    fn await_ready(&mut self, handle: &HandleId, _now: Instant) -> Result<Readiness, ProviderError> {
        let r = self
            .resources
            .get_mut(handle)
            .ok_or_else(|| ProviderError::UnknownHandle(handle.clone()))?;
        match r.handle.status {
            HandleStatus::Released => Err(ProviderError::Released(handle.clone())),
            _ => {
                r.handle.status = HandleStatus::Ready;
                Ok(Readiness::Ready(r.handle.clone()))
            }
        }
    }

    fn exec(&mut self, handle: &HandleId, command: &str, mode: ExecMode, _now: Instant) -> Result<ExecOutput, ProviderError> {
        let timeout = self.config.command_timeout;
        let dir = self.live(handle)?.dir.clone();
        let mut cmd = self.command(&dir, command);
        match mode {
            ExecMode::Blocking => {
                let mut child = cmd
                    .stdout(Stdio::piped())
                    .stderr(Stdio::piped())
                    .spawn()
                    .map_err(|e| lost(handle, e))?;
                let out = read_pipe(child.stdout.take());
                let err = read_pipe(child.stderr.take());
                let start = WallInstant::now();
                let status = loop {
                    if let Some(s) = child.try_wait().map_err(|e| lost(handle, e))? {
                        break s;
                    }
                    if start.elapsed() > timeout {
                        let _ = child.kill();
                        let _ = child.wait();
                        return Err(lost(handle, format!("`{command}` did not finish within {timeout:?}")));
                    }
                    thread::sleep(Duration::from_millis(5));
                };
                Ok(ExecOutput {
                    exit_code: Some(status.code().unwrap_or(-1)),
                    stdout: out.join().unwrap_or_default(),
                    stderr: err.join().unwrap_or_default(),
                })
            }
            ExecMode::FireAndForget => {
                self.next_proc += 1;
                let logs = dir.join(LOG_DIR);
                fs::create_dir_all(&logs).map_err(|e| lost(handle, e))?;
                let log = logs.join(format!("{:04}.log", self.next_proc));
                let file = File::create(&log).map_err(|e| lost(handle, e))?;
                let file2 = file.try_clone().map_err(|e| lost(handle, e))?;
                let child = cmd.stdout(file).stderr(file2).spawn().map_err(|e| lost(handle, e))?;
                let r = self.live(handle)?;
                r.procs.push(Background {
                    child,
                    log,
                    read_to: 0,
                    partial: String::new(),
                    label: command.to_owned(),
                });
                Ok(ExecOutput::default())
            }
        }
    }

    fn sync(&mut self, handle: &HandleId, files: &[Payload], _now: Instant) -> Result<SyncReport, ProviderError> {
        let limit = self.config.max_payload_bytes;
        let dir = self.live(handle)?.dir.clone();
        if let Some(p) = files.iter().find(|p| p.content.len() > limit) {
            return Err(ProviderError::PayloadTooLarge {
                path: p.path.clone(),
                size: p.content.len(),
                limit,
            });
        }
        let mut report = SyncReport::default();
        for p in files {
            let target = inside(&dir, &p.path).ok_or_else(|| lost(handle, format!("path {} escapes the sandbox", p.path)))?;
            let same = match (fs::metadata(&target), fs::read(&target)) {
                (Ok(meta), Ok(existing)) => existing == p.content && is_executable(&meta) == p.executable,
                _ => false,
            };
            if same {
                report.unchanged.push(p.path.clone());
                continue;
            }
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(|e| lost(handle, e))?;
            }
            // Write beside and rename so a running executable is not modified in place.
            let tmp = target.with_extension("cwb-sync");
            fs::write(&tmp, &p.content).map_err(|e| lost(handle, e))?;
            let mode = if p.executable { 0o755 } else { 0o644 };
            fs::set_permissions(&tmp, fs::Permissions::from_mode(mode)).map_err(|e| lost(handle, e))?;
            fs::rename(&tmp, &target).map_err(|e| lost(handle, e))?;
            report.written.push(p.path.clone());
        }
        Ok(report)
    }

    fn read_file(&mut self, handle: &HandleId, path: &str) -> Result<Option<Vec<u8>>, ProviderError> {
        let dir = self.live(handle)?.dir.clone();
        let target = inside(&dir, path).ok_or_else(|| lost(handle, format!("path {path} escapes the sandbox")))?;
        match fs::read(target) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(lost(handle, e)),
        }
    }

    fn release(&mut self, handle: &HandleId, _now: Instant) -> Result<(), ProviderError> {
        let r = self
            .resources
            .get_mut(handle)
            .ok_or_else(|| ProviderError::UnknownHandle(handle.clone()))?;
        if r.handle.status == HandleStatus::Released {
            return Ok(());
        }
        for p in &mut r.procs {
            let _ = p.child.kill();
            let _ = p.child.wait();
        }
        r.procs.clear();
        if r.dir.exists() {
            fs::remove_dir_all(&r.dir).map_err(|e| ProviderError::ReleaseFailed {
                handle: handle.clone(),
                detail: e.to_string(),
            })?;
        }
        r.handle.status = HandleStatus::Released;
        Ok(())
    }

    fn handles(&self) -> Vec<ResourceHandle> {
        self.resources.values().map(|r| r.handle.clone()).collect()
    }

    fn adopt(&mut self, handle: ResourceHandle) {
        if self.resources.contains_key(&handle.id) {
            return;
        }
        if let Some(n) = handle.id.0.strip_prefix("local-").and_then(|s| s.parse::<u64>().ok()) {
            self.next_handle = self.next_handle.max(n);
        }
        let dir = self.config.root.join(&handle.id.0);
        self.resources.insert(
            handle.id.clone(),
            LocalResource {
                handle,
                dir,
                procs: Vec::new(),
            },
        );
    }

    fn drain(&mut self, _now: Instant) -> Vec<DriverMessage> {
        let mut out = Vec::new();
        for r in self.resources.values_mut() {
            let owner = r.handle.owner.clone();
            let mut finished = Vec::new();
            for (i, p) in r.procs.iter_mut().enumerate() {
                let exited = p.child.try_wait().ok().flatten();
                if let Ok(mut f) = File::open(&p.log) {
                    let mut buf = Vec::new();
                    if f.seek(SeekFrom::Start(p.read_to)).is_ok() && f.read_to_end(&mut buf).is_ok() {
                        p.read_to += buf.len() as u64;
                        p.partial.push_str(&String::from_utf8_lossy(&buf));
                    }
                }
                let cut = if exited.is_some() {
                    p.partial.len()
                } else {
                    p.partial.rfind('\n').map_or(0, |i| i + 1)
                };
                let text: String = p.partial.drain(..cut).collect();
                let text = text.trim_end_matches('\n');
                if !text.is_empty() {
                    out.push(DriverMessage::Log {
                        owner: owner.clone(),
                        text: text.to_owned(),
                    });
                }
                if let Some(status) = exited {
                    out.push(DriverMessage::Log {
                        owner: owner.clone(),
                        text: format!("`{}` exited with {status}", p.label),
                    });
                    finished.push(i);
                }
            }
            for i in finished.into_iter().rev() {
                r.procs.remove(i);
            }
        }
        out
    }

    fn content_hash(&mut self, handle: &HandleId) -> Result<String, ProviderError> {
        let dir = self.live(handle)?.dir.clone();
        let mut h = Sha256::new();
        hash_tree(&mut h, &dir, &dir).map_err(|e| lost(handle, e))?;
        Ok(hex::encode(h.finalize()))
    }
}

impl Drop for LocalDriver {
    fn drop(&mut self) {
        for r in self.resources.values_mut() {
            for p in &mut r.procs {
                let _ = p.child.kill();
                let _ = p.child.wait();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, SystemClock};

    fn spec() -> VmSpec {
        VmSpec {
            role: "driver".into(),
            provider: "local".into(),
            region: String::new(),
            instance_type: "local".into(),
            image: String::new(),
            extra_resources: Default::default(),
        }
    }

    fn ready(d: &mut LocalDriver) -> HandleId {
        let now = SystemClock.now();
        let id = d.acquire(&"e1".into(), &spec(), now).unwrap()[0].id.clone();
        assert!(matches!(d.await_ready(&id, now).unwrap(), Readiness::Ready(_)));
        id
    }

    #[test]
    fn acquire_creates_fresh_sandbox() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = LocalDriver::new(LocalDriverConfig::new(tmp.path())).unwrap();
        let hs = d.acquire(&"e1".into(), &spec(), SystemClock.now()).unwrap();
        assert_eq!(hs.len(), 1);
        assert_eq!(hs[0].kind, ResourceKind::Vm);
        let dir = d.sandbox_dir(&hs[0].id).unwrap();
        assert!(dir.is_dir());
        assert_eq!(fs::read_dir(dir).unwrap().count(), 0);
    }

    #[test]
    fn echo_blocking() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = LocalDriver::new(LocalDriverConfig::new(tmp.path())).unwrap();
        let id = ready(&mut d);
        let out = d.exec(&id, "echo hi", ExecMode::Blocking, SystemClock.now()).unwrap();
        assert_eq!(out.exit_code, Some(0));
        assert_eq!(out.stdout, "hi\n");
        let out = d.exec(&id, "exit 4", ExecMode::Blocking, SystemClock.now()).unwrap();
        assert_eq!(out.exit_code, Some(4));
    }

    #[test]
    fn environment_is_restricted() {
        std::env::set_var("CWB_TEST_LEAK", "1");
        let tmp = tempfile::tempdir().unwrap();
        let mut d = LocalDriver::new(LocalDriverConfig::new(tmp.path())).unwrap();
        let id = ready(&mut d);
        let out = d
            .exec(&id, "echo \"${CWB_TEST_LEAK:-unset}\" && pwd", ExecMode::Blocking, SystemClock.now())
            .unwrap();
        let dir = d.sandbox_dir(&id).unwrap().to_string_lossy().into_owned();
        assert_eq!(out.stdout, format!("unset\n{dir}\n"));
    }

    #[test]
    fn blocking_timeout_is_connection_lost() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = LocalDriverConfig::new(tmp.path());
        cfg.command_timeout = Duration::from_millis(200);
        let mut d = LocalDriver::new(cfg).unwrap();
        let id = ready(&mut d);
        assert!(matches!(
            d.exec(&id, "sleep 5", ExecMode::Blocking, SystemClock.now()),
            Err(ProviderError::ConnectionLost { .. })
        ));
    }

    #[test]
    fn sync_executable_and_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = LocalDriver::new(LocalDriverConfig::new(tmp.path())).unwrap();
        let id = ready(&mut d);
        let files = [
            Payload::new("/cwb/agent", vec![0x7f, b'E', b'L', b'F']).executable(),
            Payload::new("/cwb/runner", "#!/bin/sh\necho run\n").executable(),
        ];
        assert_eq!(d.sync(&id, &files, SystemClock.now()).unwrap().written.len(), 2);
        let dir = d.sandbox_dir(&id).unwrap().to_path_buf();
        for f in ["cwb/agent", "cwb/runner"] {
            assert!(is_executable(&fs::metadata(dir.join(f)).unwrap()));
        }
        let hash = d.content_hash(&id).unwrap();
        assert!(d.sync(&id, &files, SystemClock.now()).unwrap().is_noop());
        assert_eq!(d.content_hash(&id).unwrap(), hash);
        assert!(d.sync(&id, &[Payload::new("../escape", "x")], SystemClock.now()).is_err());
    }

    #[test]
    fn fire_and_forget_output_is_drained() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = LocalDriver::new(LocalDriverConfig::new(tmp.path())).unwrap();
        let id = ready(&mut d);
        let out = d
            .exec(&id, "echo one; echo two", ExecMode::FireAndForget, SystemClock.now())
            .unwrap();
        assert_eq!(out.exit_code, None);
        let hash_before = d.content_hash(&id).unwrap();
        let mut text = String::new();
        for _ in 0..200 {
            for m in d.drain(SystemClock.now()) {
                if let DriverMessage::Log { text: t, .. } = m {
                    text.push_str(&t);
                    text.push('\n');
                }
            }
            if text.contains("exited") {
                break;
            }
            thread::sleep(Duration::from_millis(10));
        }
        assert!(text.starts_with("one\ntwo\n"), "{text}");
        // logs do not count as resource content
        assert_eq!(d.content_hash(&id).unwrap(), hash_before);
    }

    #[test]
    fn release_tears_down_and_is_idempotent() {
        let tmp = tempfile::tempdir().unwrap();
        let mut d = LocalDriver::new(LocalDriverConfig::new(tmp.path())).unwrap();
        let id = ready(&mut d);
        d.exec(&id, "sleep 30", ExecMode::FireAndForget, SystemClock.now()).unwrap();
        let dir = d.sandbox_dir(&id).unwrap().to_path_buf();
        d.release(&id, SystemClock.now()).unwrap();
        assert!(!dir.exists());
        d.release(&id, SystemClock.now()).unwrap();
        assert!(matches!(
            d.exec(&id, "true", ExecMode::Blocking, SystemClock.now()),
            Err(ProviderError::Released(_))
        ));
        assert!(d.handles().iter().all(|h| h.status == HandleStatus::Released));
    }
}
