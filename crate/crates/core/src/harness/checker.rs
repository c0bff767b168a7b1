use std::io::Read;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use wait_timeout::ChildExt;

use crate::pygraph::AnnotationSite;
use crate::typeexpr::TypeExpr;

pub const CHECKER_TIMEOUT: Duration = Duration::from_secs(20);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CheckOutcome {
    /// The checker reported no type error.
    Accept,
    /// The checker reported a type error.
    Reject,
    /// No verdict: unconfigured, crashed or timed out.
    Skip(String),
}

/// Runs an external optional type checker on a copy of the file with one
/// annotation written in. Exit status 0 accepts, 1 rejects, anything else
/// skips. `{file}` in the command is replaced by the patched file's path,
/// which is appended when no placeholder is present.
#[derive(Debug)]
pub struct CheckerHook {
    command: Option<Vec<String>>,
    timeout: Duration,
    workdir: PathBuf,
    lock: Mutex<u64>,
}

impl CheckerHook {
    pub fn unconfigured() -> Self {
        CheckerHook {
            command: None,
            timeout: CHECKER_TIMEOUT,
            workdir: std::env::temp_dir(),
            lock: Mutex::new(0),
        }
    }

    pub fn new(command: Vec<String>) -> Self {
        CheckerHook {
            command: (!command.is_empty()).then_some(command),
            ..CheckerHook::unconfigured()
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn is_configured(&self) -> bool {
        self.command.is_some()
    }

    /// Checks `source` with `ty` written at `site`. Calls are serialized.
    pub fn check(&self, source: &str, site: &AnnotationSite, ty: &TypeExpr) -> CheckOutcome {
        let Some(command) = &self.command else {
            return CheckOutcome::Skip("no checker configured".into());
        };
        let mut counter = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        *counter += 1;
        let path = self
            .workdir
            .join(format!("typespace-check-{}-{}.py", std::process::id(), *counter));
        if let Err(e) = std::fs::write(&path, site.apply(source, &ty.to_string())) {
            return CheckOutcome::Skip(format!("cannot write {}: {e}", path.display()));
        }
        let outcome = self.run(command, &path);
        let _ = std::fs::remove_file(&path);
        outcome
    }

    fn run(&self, command: &[String], path: &std::path::Path) -> CheckOutcome {
        let file = path.to_string_lossy();
        let mut args: Vec<String> = command.iter().map(|a| a.replace("{file}", &file)).collect();
        if !command.iter().any(|a| a.contains("{file}")) {
            args.push(file.into_owned());
        }
        let mut child = match Command::new(&args[0])
            .args(&args[1..])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return CheckOutcome::Skip(format!("cannot start {}: {e}", args[0])),
        };
        match child.wait_timeout(self.timeout) {
            Ok(Some(status)) => match status.code() {
                Some(0) => CheckOutcome::Accept,
                Some(1) => CheckOutcome::Reject,
                code => {
                    let mut err = String::new();
                    if let Some(mut e) = child.stderr.take() {
                        let _ = e.read_to_string(&mut err);
                    }
                    CheckOutcome::Skip(format!("checker exited with {code:?}: {}", err.trim()))
                }
            },
            Ok(None) => {
                let _ = child.kill();
                let _ = child.wait();
                CheckOutcome::Skip(format!("checker timed out after {:?}", self.timeout))
            }
            Err(e) => CheckOutcome::Skip(format!("waiting for checker: {e}")),
        }
    }
}
