//! Thin subprocess wrapper around the `git` command line.

use std::ffi::OsStr;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use crate::repo::RepoError;

#[derive(Debug, Clone)]
pub(crate) struct Git {
    workdir: PathBuf,
    index_file: Option<PathBuf>,
}

impl Git {
    pub(crate) fn new(workdir: impl Into<PathBuf>) -> Self {
        Git {
            workdir: workdir.into(),
            index_file: None,
        }
    }

    /// A runner that stages into an alternate index file instead of `.git/index`.
    pub(crate) fn with_index(&self, index: &Path) -> Self {
        Git {
            workdir: self.workdir.clone(),
            index_file: Some(index.to_path_buf()),
        }
    }

    fn command<I, S>(&self, args: I) -> (Command, String)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let mut cmd = Command::new("git");
        let mut shown = String::from("git");
        cmd.current_dir(&self.workdir);
        cmd.env("GIT_LITERAL_PATHSPECS", "1");
        cmd.env("LC_ALL", "C");
        if let Some(index) = &self.index_file {
            cmd.env("GIT_INDEX_FILE", index);
        }
        for a in args {
            shown.push(' ');
            shown.push_str(&a.as_ref().to_string_lossy());
            cmd.arg(a);
        }
        (cmd, shown)
    }

    /// Runs git and returns the raw output regardless of exit status.
    pub(crate) fn output<I, S>(&self, args: I, stdin: Option<&[u8]>) -> Result<Output, RepoError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let (mut cmd, shown) = self.command(args);
        log::trace!("{shown}");
        cmd.stdout(Stdio::piped()).stderr(Stdio::piped());
        cmd.stdin(if stdin.is_some() {
            Stdio::piped()
        } else {
            Stdio::null()
        });
        let mut child = cmd.spawn().map_err(|e| RepoError::Backend {
            command: shown.clone(),
            code: None,
            stdout: String::new(),
            stderr: e.to_string(),
        })?;
        if let Some(data) = stdin {
            let mut pipe = child.stdin.take().expect("stdin piped");
            pipe.write_all(data).map_err(|e| RepoError::Backend {
                command: shown.clone(),
                code: None,
                stdout: String::new(),
                stderr: e.to_string(),
            })?;
        }
        child.wait_with_output().map_err(|e| RepoError::Backend {
            command: shown,
            code: None,
            stdout: String::new(),
            stderr: e.to_string(),
        })
    }

    /// Runs git, failing with captured diagnostics on a non-zero exit.
    pub(crate) fn run<I, S>(&self, args: I) -> Result<Vec<u8>, RepoError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        self.run_with_stdin(args, None)
    }

    pub(crate) fn run_with_stdin<I, S>(
        &self,
        args: I,
        stdin: Option<&[u8]>,
    ) -> Result<Vec<u8>, RepoError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let args: Vec<S> = args.into_iter().collect();
        let shown = std::iter::once("git".to_string())
            .chain(args.iter().map(|a| a.as_ref().to_string_lossy().into_owned()))
            .collect::<Vec<_>>()
            .join(" ");
        let out = self.output(args, stdin)?;
        if out.status.success() {
            Ok(out.stdout)
        } else {
            Err(backend_error(shown, &out))
        }
    }

    pub(crate) fn run_text<I, S>(&self, args: I) -> Result<String, RepoError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<OsStr>,
    {
        let out = self.run(args)?;
        Ok(String::from_utf8_lossy(&out).trim_end().to_string())
    }
}

pub(crate) fn backend_error(command: String, out: &Output) -> RepoError {
    RepoError::Backend {
        command,
        code: out.status.code(),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Splits NUL-terminated git output into owned strings.
pub(crate) fn split_nul(raw: &[u8]) -> Vec<String> {
    raw.split(|b| *b == 0)
        .filter(|s| !s.is_empty())
        .map(|s| String::from_utf8_lossy(s).into_owned())
        .collect()
}
