//! Browse, search, read and checksum files under a publishing area.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom};
use std::path::{Component, Path, PathBuf};

use md5::{Digest, Md5};
use regex::Regex;
use wildmatch::WildMatch;

use crate::rpc::{RpcValue, ValueError};

use super::WorkerError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileEntry {
    pub name: String,
    pub size: u64,
    pub is_dir: bool,
}

impl FileEntry {
    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("name", RpcValue::from(self.name.as_str())),
            // sizes travel as strings; i4 tops out at 2 GiB
            ("size", RpcValue::from(self.size.to_string())),
            ("is_dir", RpcValue::Bool(self.is_dir)),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        let size = v.member("size")?.as_str()?;
        Ok(FileEntry {
            name: v.member("name")?.as_str()?.to_owned(),
            size: size
                .parse()
                .map_err(|_| ValueError(format!("bad size `{size}`")))?,
            is_dir: v.member("is_dir")?.as_bool()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrepMatch {
    /// Path relative to the publishing area, with a leading `/`.
    pub path: String,
    pub line_number: u32,
    pub line: String,
}

impl GrepMatch {
    pub fn to_rpc(&self) -> RpcValue {
        RpcValue::record([
            ("path", RpcValue::from(self.path.as_str())),
            (
                "line_number",
                RpcValue::Int(self.line_number.min(i32::MAX as u32) as i32),
            ),
            ("line", RpcValue::from(self.line.as_str())),
        ])
    }

    pub fn from_rpc(v: &RpcValue) -> Result<Self, ValueError> {
        Ok(GrepMatch {
            path: v.member("path")?.as_str()?.to_owned(),
            line_number: v.member("line_number")?.as_i32()?.max(0) as u32,
            line: v.member("line")?.as_str()?.to_owned(),
        })
    }
}

/// Joins `rel` onto `root`, refusing anything that could land outside it:
/// `..` components lexically, and symlinks via canonicalization when the
/// target exists. A leading `/` in `rel` means the root itself.
pub fn resolve_within(root: &Path, rel: &str) -> Result<PathBuf, WorkerError> {
    let outside = || WorkerError::OutsideRoot(rel.to_owned());
    let mut joined = root.to_path_buf();
    for comp in Path::new(rel).components() {
        match comp {
            Component::Normal(c) => joined.push(c),
            Component::RootDir | Component::CurDir => {}
            Component::ParentDir | Component::Prefix(_) => return Err(outside()),
        }
    }
    match joined.canonicalize() {
        Ok(real) if real.starts_with(root) => Ok(real),
        Ok(_) => Err(outside()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(WorkerError::NotFound(rel.to_owned())),
        Err(e) => Err(WorkerError::Io(e)),
    }
}

/// Reads `length` bytes at `offset`; a length of 0 reads to the end.
/// The requested range must lie within the file.
pub fn read_range(path: &Path, offset: i64, length: i64) -> Result<Vec<u8>, WorkerError> {
    if offset < 0 || length < 0 {
        return Err(WorkerError::Range(format!(
            "negative offset or length ({offset}, {length})"
        )));
    }
    let mut f = File::open(path)?;
    let size = f.metadata()?.len();
    let (offset, length) = (offset as u64, length as u64);
    if offset > size {
        return Err(WorkerError::Range(format!(
            "offset {offset} beyond size {size}"
        )));
    }
    let length = if length == 0 { size - offset } else { length };
    if offset + length > size {
        return Err(WorkerError::Range(format!(
            "range {offset}+{length} beyond size {size}"
        )));
    }
    f.seek(SeekFrom::Start(offset))?;
    let mut buf = Vec::with_capacity(length as usize);
    f.take(length).read_to_end(&mut buf)?;
    Ok(buf)
}

pub fn md5_file(path: &Path) -> io::Result<String> {
    let mut hasher = Md5::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 64 * 1024];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex(&hasher.finalize()))
}

pub fn md5_bytes(bytes: &[u8]) -> String {
    hex(&Md5::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn has_wildcard(s: &str) -> bool {
    s.contains(['*', '?'])
}

#[derive(Debug, Clone)]
pub struct FileService {
    root: PathBuf,
}

impl FileService {
    /// Creates the publishing area if needed.
    pub fn open(root: impl AsRef<Path>) -> io::Result<Self> {
        std::fs::create_dir_all(root.as_ref())?;
        Ok(FileService {
            root: root.as_ref().canonicalize()?,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> Result<PathBuf, WorkerError> {
        resolve_within(&self.root, rel)
    }

    fn display_path(&self, p: &Path) -> String {
        let rel = p.strip_prefix(&self.root).unwrap_or(p);
        format!("/{}", rel.to_string_lossy())
    }

    /// Lists a directory's entries matching `pattern` (`*`, `?`), sorted by
    /// name. A plain file lists as itself.
    pub fn ls(&self, path: &str, pattern: &str) -> Result<Vec<FileEntry>, WorkerError> {
        let target = self.resolve(path)?;
        let pattern = if pattern.is_empty() { "*" } else { pattern };
        let wild = WildMatch::new(pattern);
        let meta = std::fs::metadata(&target)?;
        let mut out = Vec::new();
        if meta.is_dir() {
            for entry in std::fs::read_dir(&target)? {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if !wild.matches(&name) {
                    continue;
                }
                // follow symlinks, but only ones that stay inside
                let Ok(real) = entry.path().canonicalize() else {
                    continue;
                };
                if !real.starts_with(&self.root) {
                    continue;
                }
                let m = std::fs::metadata(&real)?;
                out.push(FileEntry {
                    name,
                    size: if m.is_dir() { 0 } else { m.len() },
                    is_dir: m.is_dir(),
                });
            }
        } else {
            let name = target
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            if wild.matches(&name) {
                out.push(FileEntry {
                    name,
                    size: meta.len(),
                    is_dir: false,
                });
            }
        }
        out.sort_by(|a, b| a.name.cmp(&b.name));
        Ok(out)
    }

    pub fn read(&self, path: &str, offset: i64, length: i64) -> Result<Vec<u8>, WorkerError> {
        let target = self.resolve(path)?;
        if target.is_dir() {
            return Err(WorkerError::NotFound(format!("{path} is a directory")));
        }
        read_range(&target, offset, length)
    }

    pub fn md5(&self, path: &str) -> Result<String, WorkerError> {
        let target = self.resolve(path)?;
        if target.is_dir() {
            return Err(WorkerError::NotFound(format!("{path} is a directory")));
        }
        Ok(md5_file(&target)?)
    }

    /// Searches for `regex` in a file, in every file below a directory, or
    /// in the files matched by a wildcard in the last path component.
    /// Files that are not valid UTF-8 are skipped.
    pub fn grep(&self, path: &str, regex: &str) -> Result<Vec<GrepMatch>, WorkerError> {
        let re = Regex::new(regex).map_err(|e| WorkerError::BadPattern(e.to_string()))?;
        let mut files = Vec::new();
        let (parent, last) = match path.trim_end_matches('/').rsplit_once('/') {
            Some((p, l)) => (p, l),
            None => ("", path),
        };
        if has_wildcard(parent) {
            return Err(WorkerError::BadPattern(
                "wildcards are only allowed in the last path component".into(),
            ));
        }
        if has_wildcard(last) {
            let dir = self.resolve(parent)?;
            let wild = WildMatch::new(last);
            for entry in std::fs::read_dir(&dir)? {
                let entry = entry?;
                if wild.matches(&entry.file_name().to_string_lossy()) {
                    self.collect_files(&entry.path(), &mut files);
                }
            }
        } else {
            let target = self.resolve(path)?;
            self.collect_files(&target, &mut files);
        }
        files.sort();
        files.dedup();
        let mut out = Vec::new();
        for file in files {
            let Ok(f) = File::open(&file) else { continue };
            let mut hits = Vec::new();
            let mut ok = true;
            for (i, line) in BufReader::new(f).lines().enumerate() {
                match line {
                    Ok(line) => {
                        if re.is_match(&line) {
                            hits.push(GrepMatch {
                                path: self.display_path(&file),
                                line_number: i as u32 + 1,
                                line,
                            });
                        }
                    }
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                out.extend(hits);
            }
        }
        Ok(out)
    }

    fn collect_files(&self, start: &Path, out: &mut Vec<PathBuf>) {
        for entry in walkdir::WalkDir::new(start)
            .follow_links(true)
            .into_iter()
            .flatten()
        {
            if !entry.file_type().is_file() {
                continue;
            }
            if let Ok(real) = entry.path().canonicalize() {
                if real.starts_with(&self.root) {
                    out.push(real);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn service() -> (tempfile::TempDir, FileService) {
        let dir = tempfile::tempdir().unwrap();
        let svc = FileService::open(dir.path().join("pub")).unwrap();
        (dir, svc)
    }

    #[test]
    fn ls_patterns() {
        let (_d, svc) = service();
        std::fs::write(svc.root().join("a.root"), b"12345").unwrap();
        std::fs::write(svc.root().join("b.txt"), b"").unwrap();
        std::fs::create_dir(svc.root().join("sub")).unwrap();
        let names = |v: Vec<FileEntry>| v.into_iter().map(|e| e.name).collect::<Vec<_>>();
        assert_eq!(names(svc.ls("/", "*").unwrap()), ["a.root", "b.txt", "sub"]);
        assert_eq!(
            svc.ls("", "*.root").unwrap(),
            vec![FileEntry {
                name: "a.root".into(),
                size: 5,
                is_dir: false
            }]
        );
        assert_eq!(names(svc.ls("/", "?.txt").unwrap()), ["b.txt"]);
        assert_eq!(names(svc.ls("/a.root", "*").unwrap()), ["a.root"]);
        assert!(matches!(
            svc.ls("../etc", "*"),
            Err(WorkerError::OutsideRoot(_))
        ));
        assert!(matches!(
            svc.ls("/missing", "*"),
            Err(WorkerError::NotFound(_))
        ));
    }

    #[test]
    fn md5_vectors() {
        let (_d, svc) = service();
        std::fs::write(svc.root().join("empty"), b"").unwrap();
        std::fs::write(svc.root().join("abc"), b"abc").unwrap();
        assert_eq!(
            svc.md5("empty").unwrap(),
            "d41d8cd98f00b204e9800998ecf8427e"
        );
        assert_eq!(svc.md5("/abc").unwrap(), "900150983cd24fb0d6963f7d28e17f72");
        assert!(matches!(svc.md5("nope"), Err(WorkerError::NotFound(_))));
    }

    #[test]
    fn read_ranges() {
        let (_d, svc) = service();
        std::fs::write(svc.root().join("f"), b"0123456789").unwrap();
        assert_eq!(svc.read("f", 0, 10).unwrap(), b"0123456789");
        assert_eq!(svc.read("f", 3, 0).unwrap(), b"3456789");
        assert_eq!(svc.read("f", 10, 0).unwrap(), b"");
        assert_eq!(svc.read("f", 4, 2).unwrap(), b"45");
        for (o, l) in [(-1, 1), (0, -1), (11, 0), (5, 6)] {
            assert!(
                matches!(svc.read("f", o, l), Err(WorkerError::Range(_))),
                "{o} {l}"
            );
        }
    }

    #[test]
    fn grep_orders_and_filters() {
        let (_d, svc) = service();
        std::fs::create_dir(svc.root().join("logs")).unwrap();
        std::fs::write(svc.root().join("logs/b.log"), "ok\nERROR two\n").unwrap();
        std::fs::write(
            svc.root().join("logs/a.log"),
            "ERROR one\nok\nok\nERROR three\nok\n",
        )
        .unwrap();
        std::fs::write(
            svc.root().join("logs/bin.dat"),
            [0xff, 0xfe, b'E', b'R', b'R', b'O', b'R'],
        )
        .unwrap();
        let hits = svc.grep("/logs", "ERROR").unwrap();
        let got: Vec<_> = hits
            .iter()
            .map(|m| (m.path.as_str(), m.line_number))
            .collect();
        assert_eq!(
            got,
            [("/logs/a.log", 1), ("/logs/a.log", 4), ("/logs/b.log", 2)]
        );
        assert_eq!(svc.grep("/logs/a.log", "ERROR").unwrap().len(), 2);
        assert_eq!(svc.grep("/logs/b*", "ERROR").unwrap().len(), 1);
        assert!(svc.grep("/logs", "nothing").unwrap().is_empty());
        assert!(matches!(
            svc.grep("/logs", "("),
            Err(WorkerError::BadPattern(_))
        ));
        assert!(matches!(
            svc.grep("../", "x"),
            Err(WorkerError::OutsideRoot(_))
        ));
    }

    #[test]
    fn adversarial_paths() {
        let (dir, svc) = service();
        std::fs::write(dir.path().join("secret"), b"top secret").unwrap();
        std::fs::write(svc.root().join("ok.txt"), b"fine").unwrap();
        std::os::unix::fs::symlink(dir.path().join("secret"), svc.root().join("link")).unwrap();
        std::os::unix::fs::symlink(dir.path(), svc.root().join("dirlink")).unwrap();
        for p in [
            "../secret",
            "/../secret",
            "a/../../secret",
            "..",
            "./../secret",
            "link",
            "dirlink/secret",
            "dirlink",
        ] {
            let r = svc.read(p, 0, 0);
            assert!(
                matches!(r, Err(WorkerError::OutsideRoot(_))),
                "read {p}: {r:?}"
            );
            assert!(
                matches!(svc.md5(p), Err(WorkerError::OutsideRoot(_))),
                "md5 {p}"
            );
            assert!(
                matches!(svc.ls(p, "*"), Err(WorkerError::OutsideRoot(_))),
                "ls {p}"
            );
        }
        // absolute paths are rooted at the publishing area
        assert_eq!(svc.read("/ok.txt", 0, 0).unwrap(), b"fine");
        assert!(matches!(
            svc.read("/etc/passwd", 0, 0),
            Err(WorkerError::NotFound(_))
        ));
        // listings and searches skip escaping links
        let names: Vec<_> = svc
            .ls("/", "*")
            .unwrap()
            .into_iter()
            .map(|e| e.name)
            .collect();
        assert_eq!(names, ["ok.txt"]);
        assert!(svc.grep("/", "secret").unwrap().is_empty());
    }
}
