pub mod eval;
pub mod lif;
pub mod simulate;
pub mod solve;

pub const TENSOR: &str = "tensor.json";
pub const TRUTH: &str = "truth.jsonl";
pub const TRUE_KERNEL: &str = "kernel.json";
pub const REPORTS: &str = "reports.jsonl";
pub const KERNELS: &str = "kernels.json";

/// Writes to stdout; a closed pipe (e.g. `| head`) ends the process
/// quietly instead of panicking.
pub fn emit(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        eprintln!("error: writing to stdout: {e}");
        std::process::exit(3);
    }
}

/// JSON on stdout with `--json`, otherwise one human-readable line.
pub fn print_summary(json: bool, summary: &serde_json::Value, human: impl FnOnce() -> String) {
    if json {
        emit(&(serde_json::to_string_pretty(summary).expect("plain json") + "\n"));
    } else {
        emit(&(human() + "\n"));
    }
}

/// Finite numbers as JSON numbers, infinities as the strings `"inf"` and
/// `"-inf"`, NaN as null.
pub fn json_number(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else if v.is_nan() {
        serde_json::Value::Null
    } else if v > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}
