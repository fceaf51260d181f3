//! Fixtures shared by unit tests.

use crate::sandbox::{ExecStatus, ExecutionRequest, ExecutionResult, FnExecutor};

/// Evaluates `print(a+b+...)`, fails on `1/0`, succeeds silently otherwise.
pub(crate) fn fake_python() -> FnExecutor<impl Fn(&ExecutionRequest) -> ExecutionResult + Send + Sync> {
    FnExecutor(|req: &ExecutionRequest| {
        let src = req.source.trim();
        let (status, stdout, stderr) = if src.contains("1/0") {
            (
                ExecStatus::Exception,
                String::new(),
                "ZeroDivisionError: division by zero".to_string(),
            )
        } else if let Some(expr) = src.strip_prefix("print(").and_then(|s| s.strip_suffix(')')) {
            let sum: i64 = expr
                .split('+')
                .map(|p| p.trim().parse::<i64>().unwrap_or(0))
                .sum();
            (ExecStatus::Success, format!("{sum}\n"), String::new())
        } else {
            (ExecStatus::Success, String::new(), String::new())
        };
        ExecutionResult {
            status,
            stdout,
            stderr,
            duration_ms: 1,
            timeout_ms: req.timeout_ms,
        }
    })
}
