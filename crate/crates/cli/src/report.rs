//! Plan reports in text and JSON form.

use patchtunnel::MemoryPlan;
use serde_json::{json, Value};

pub fn kb(bytes: u64) -> String {
    format!("{:.2} KB", bytes as f64 / 1024.0)
}

pub fn verdict(plan: &MemoryPlan) -> &'static str {
    if plan.within_budget {
        "within-budget"
    } else {
        "over-budget"
    }
}

pub fn text(plan: &MemoryPlan, parallel: Option<u64>) -> String {
    let mut out = String::new();
    let width = plan.per_op.iter().map(|op| op.label.len()).max().unwrap_or(2).max(2);
    out.push_str(&format!(
        "mode {}, {} byte(s) per element\n\n",
        plan.mode, plan.elem_bytes
    ));
    out.push_str(&format!("{:<width$}  {:>12}  {:>12}  {:>12}\n", "op", "elements", "bytes", "KB"));
    for (i, op) in plan.per_op.iter().enumerate() {
        let mark = if i == plan.peak_op { " *" } else { "" };
        out.push_str(&format!(
            "{:<width$}  {:>12}  {:>12}  {:>12.2}{mark}\n",
            op.label,
            op.elements,
            op.bytes,
            op.bytes as f64 / 1024.0
        ));
    }
    let resident_bytes = plan.resident_elements * plan.elem_bytes;
    out.push('\n');
    out.push_str(&format!(
        "resident head accumulator: {} elements, {} bytes ({})\n",
        plan.resident_elements,
        resident_bytes,
        kb(resident_bytes)
    ));
    out.push_str(&format!("peak op: {}\n", plan.peak().label));
    out.push_str(&format!(
        "peak: {} elements, {} bytes ({})\n",
        plan.peak_elements,
        plan.peak_bytes,
        kb(plan.peak_bytes)
    ));
    out.push_str(&format!("budget: {} bytes ({})\n", plan.budget_bytes, kb(plan.budget_bytes)));
    if let Some(d) = parallel {
        let bytes = plan.parallel_peak_bytes(d);
        out.push_str(&format!("what-if {d} tunnels in parallel: {bytes} bytes ({})\n", kb(bytes)));
    }
    out.push_str(&format!("verdict: {}\n", verdict(plan)));
    out
}

/// Pretty JSON with keys in sorted order, so equal plans print equal bytes.
pub fn json(plan: &MemoryPlan, parallel: Option<u64>) -> String {
    let ops: Vec<Value> = plan
        .per_op
        .iter()
        .map(|op| {
            json!({
                "label": op.label,
                "tunnel": op.tunnel,
                "elements": op.elements,
                "bytes": op.bytes,
            })
        })
        .collect();
    let mut doc = json!({
        "mode": plan.mode,
        "elem_bytes": plan.elem_bytes,
        "budget_bytes": plan.budget_bytes,
        "budget_kb": plan.budget_bytes as f64 / 1024.0,
        "resident_elements": plan.resident_elements,
        "ops": ops,
        "peak_op": plan.peak().label,
        "peak_elements": plan.peak_elements,
        "peak_bytes": plan.peak_bytes,
        "peak_kb": plan.peak_bytes as f64 / 1024.0,
        "verdict": verdict(plan),
    });
    if let Some(d) = parallel {
        doc["parallel"] = json!({ "degree": d, "peak_bytes": plan.parallel_peak_bytes(d) });
    }
    let mut s = serde_json::to_string_pretty(&doc).expect("plain data");
    s.push('\n');
    s
}
