mod common;

use std::time::Instant;

use thor_core::sandbox::{format_observation, ExecStatus, ExecutionRequest, Executor, SandboxConfig, SubprocessExecutor};

use common::{runner_config, runner_executor};

#[test]
fn success_over_subprocess() {
    let res = runner_executor().run_code("print(2+3)");
    assert_eq!(res.status, ExecStatus::Success);
    assert_eq!(res.stdout, "5\n");
    assert_eq!(format_observation(&res), "5\n");
    let res = runner_executor().run_code("print(7*6)");
    assert_eq!(res.stdout, "42\n");
}

#[test]
fn exception_over_subprocess() {
    let exec = runner_executor();
    let res = exec.run_code("1/0");
    assert_eq!(res.status, ExecStatus::Exception);
    assert!(res.stderr.contains("ZeroDivisionError"));
    let res = exec.run_code("raise ValueError('x')");
    assert_eq!(res.status, ExecStatus::Exception);
    assert!(res.stderr.contains("ValueError"));
    assert!(format_observation(&res).starts_with("[[execution error]]\n"));
}

#[test]
fn timeout_over_subprocess() {
    let exec = runner_executor();
    let req = ExecutionRequest::new("while True: pass").with_timeout_ms(1000);
    let started = Instant::now();
    let res = exec.execute(&req);
    let wall = started.elapsed().as_millis() as u64;
    assert_eq!(res.status, ExecStatus::Timeout);
    assert!(res.duration_ms >= 1000, "{}", res.duration_ms);
    assert!(wall <= 1500, "timeout overshoot: {wall} ms");
    assert_eq!(format_observation(&res), "[[execution timeout after 1000 ms]]");
}

#[test]
fn empty_stdout_is_success_and_state_is_not_shared() {
    let exec = runner_executor();
    assert_eq!(exec.run_code("x = 41").status, ExecStatus::Success);
    let res = exec.run_code("print(x)");
    assert_eq!(res.status, ExecStatus::Exception);
    assert!(res.stderr.contains("NameError"));
}

#[test]
fn stdout_is_capped() {
    let exec = SubprocessExecutor::new(SandboxConfig {
        stdout_cap_bytes: 16,
        ..runner_config()
    })
    .unwrap();
    let res = exec.run_code("print('a' * 100)");
    assert_eq!(res.status, ExecStatus::Success);
    assert!(res.stdout.contains("[[truncated"), "{:?}", res.stdout);
}

#[test]
fn concurrent_calls_share_the_pool() {
    let exec = runner_executor();
    let results: Vec<_> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..8)
            .map(|i| {
                let exec = &exec;
                s.spawn(move || exec.run_code(&format!("print({i}*2)")))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for (i, r) in results.iter().enumerate() {
        assert_eq!(r.stdout, format!("{}\n", i * 2));
    }
}
