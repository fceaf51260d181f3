#![allow(dead_code)]

use std::path::PathBuf;

use thor_core::sandbox::{SandboxConfig, SubprocessExecutor};

pub fn runner_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/runner.py")
}

pub fn runner_config() -> SandboxConfig {
    SandboxConfig {
        cmd: vec!["python3".into(), runner_path().display().to_string()],
        ..SandboxConfig::default()
    }
}

pub fn runner_executor() -> SubprocessExecutor {
    SubprocessExecutor::new(runner_config()).expect("valid runner config")
}
