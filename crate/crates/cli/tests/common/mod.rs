//! Helpers shared by the integration-test binaries.
// Each test binary compiles this module separately and uses its own subset.
#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

/// Runs the `actseg` binary with the given arguments.
pub fn actseg<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_actseg"))
        .args(args)
        .output()
        .expect("binary launches")
}

pub fn assert_ok(output: &Output) {
    assert!(
        output.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
}

pub fn exit_code(output: &Output) -> i32 {
    output.status.code().expect("process exited")
}

pub fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).into_owned()
}

pub fn arg(path: &Path) -> &str {
    path.to_str().expect("paths in tests are valid UTF-8")
}
