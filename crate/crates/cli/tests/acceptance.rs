//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure or time-limit overrun.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use patchtunnel::bottleneck::{bottleneck_reordered, bottleneck_standard, StageAffine};
use patchtunnel::modelio::{load_spec, load_weights, save_weights, serialize_spec};
use patchtunnel::runtime::{compare_orders, relative_linf};
use patchtunnel::synth::{self, NetLimits};
use patchtunnel::{
    execute_network, extract_patches, layer_footprint, patch_area_ratio, plan_network, plan_regions, Arena,
    BlockConfig, BottleneckSpec, ConvParams, ExecMode, HeadSpec, MemoryBudget, NetworkSpec, NetworkWeights,
    PatchLayout, Tensor, TensorShape, TunnelSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, u64, fn() -> Outcome);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn unlimited() -> MemoryBudget {
    MemoryBudget::new(u64::MAX, 1).unwrap()
}

fn reordering_equivalence() -> Outcome {
    const TS: [usize; 5] = [1, 2, 4, 6, 8];
    let mut rng = ChaCha8Rng::seed_from_u64(0xE0);
    let mut worst = 0.0f64;
    let mut worst_same = 0.0f64;
    for i in 0..200 {
        let t = TS[i % 5];
        let s = 1 + (i / 5) % 2;
        let residual = s == 1 && (i / 10) % 2 == 1;
        let affine = ((i / 20) % 2 == 1).then_some(StageAffine { relu6: (i / 40) % 2 == 0 });
        let c_in = rng.gen_range(1..=8);
        let c_out = if residual { c_in } else { rng.gen_range(1..=8) };
        let spec = BottleneckSpec { c_in, t, s, c_out, residual, expand_affine: affine, dw_affine: affine };
        let shape = TensorShape { h: rng.gen_range(1..=12), w: rng.gen_range(1..=12), c: c_in };
        let x: Tensor<f64> = synth::normal_tensor(shape, &mut rng);
        let w = synth::bottleneck_weights(&spec, &mut rng);
        let dev = compare_orders(&x, &spec, &w).map_err(|e| format!("config {i}: {e}"))?;
        ensure(dev <= 1e-5, format!("config {i} ({spec:?}) deviates by {dev:e}"))?;
        worst = worst.max(dev);

        let standard = bottleneck_standard(&x, &spec, &w).map_err(|e| e.to_string())?;
        let reordered =
            bottleneck_reordered(&x, &spec, &w, &mut Arena::unbounded(Default::default())).map_err(|e| e.to_string())?;
        worst_same = worst_same.max(relative_linf(reordered.data(), standard.data()));
    }
    ensure(worst_same <= 1e-5, format!("same-precision deviation {worst_same:e}"))?;
    Ok(format!("200 configs, max rel dev {worst:.3e} (f32 vs f64), {worst_same:.3e} (f64 vs f64)"))
}

/// One tunnel of bottlenecks on 16x16x8 with expansion `t` throughout.
fn bottleneck_net(t: usize) -> NetworkSpec {
    let relu = Some(StageAffine { relu6: true });
    let block = |s, c_out, residual| BlockConfig { t, s, c_out, residual, expand_affine: relu, dw_affine: relu };
    NetworkSpec {
        input: TensorShape { h: 16, w: 16, c: 8 },
        layout: PatchLayout::whole_image(),
        tunnels: vec![TunnelSpec::chain(8, None, &[block(1, 8, true), block(2, 16, false), block(1, 16, true)])],
        head: HeadSpec { classes: 10 },
    }
}

fn peak_invariance_over_t() -> Outcome {
    let mut reordered = Vec::new();
    let mut standard = Vec::new();
    for t in [2, 4, 6, 8] {
        let net = bottleneck_net(t);
        let r = plan_network(&net, &unlimited(), ExecMode::Reordered).map_err(|e| e.to_string())?;
        ensure(r.peak().label.contains("bottleneck"), "peak op is not a bottleneck")?;
        reordered.push(r.peak_bytes);
        standard.push(plan_network(&net, &unlimited(), ExecMode::Standard).map_err(|e| e.to_string())?.peak_bytes);
    }
    ensure(reordered.windows(2).all(|p| p[0] == p[1]), format!("reordered peaks differ: {reordered:?}"))?;
    ensure(standard.windows(2).all(|p| p[0] < p[1]), format!("standard peaks not increasing: {standard:?}"))?;
    Ok(format!("reordered {reordered:?}, standard {standard:?}"))
}

fn worked_example() -> Outcome {
    let shape = TensorShape { h: 130, w: 130, c: 3 };
    let params = ConvParams { k_h: 3, k_w: 3, s: 1, p_h: 0, p_w: 0, c_in: 3, c_out: 3 };
    let n = layer_footprint(shape, &params).map_err(|e| e.to_string())?;
    ensure(n == 99_852, format!("footprint {n}"))?;
    let budget = MemoryBudget::new(262_144, 1).unwrap();
    ensure(n * budget.elem_bytes() <= budget.budget_bytes, "does not fit 262,144 bytes")?;
    Ok(format!("{n} elements <= 262144 bytes at 1 byte/element"))
}

fn accounting_ratio() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA4);
    for i in 0..20 {
        let net = synth::random_network(&NetLimits::default(), &mut rng);
        for mode in [ExecMode::Standard, ExecMode::Reordered] {
            let one = plan_network(&net, &MemoryBudget::new(1 << 20, 1).unwrap(), mode).map_err(|e| e.to_string())?;
            let four = plan_network(&net, &MemoryBudget::new(1 << 20, 4).unwrap(), mode).map_err(|e| e.to_string())?;
            ensure(
                four.peak_bytes == 4 * one.peak_bytes,
                format!("net {i} {mode}: {} vs {}", four.peak_bytes, one.peak_bytes),
            )?;
        }
    }
    Ok("20 nets, both modes, ratio exactly 4".into())
}

fn segmentation_geometry() -> Outcome {
    let shape = TensorShape { h: 224, w: 224, c: 3 };
    let layout = PatchLayout { k: 4, m_h: 18, m_w: 18, central: true };
    let regions = plan_regions(shape, &layout).map_err(|e| e.to_string())?;
    let got: Vec<_> = regions.iter().map(|r| (r.row0, r.col0, r.height, r.width)).collect();
    let want = vec![(0, 0, 130, 130), (0, 94, 130, 130), (94, 0, 130, 130), (94, 94, 130, 130), (47, 47, 130, 130)];
    ensure(got == want, format!("regions {got:?}"))?;

    let image = Tensor::<f64>::from_fn(shape, |i, j, c| (i * 224 * 3 + j * 3 + c) as f64);
    let patches = extract_patches(&image, &regions).map_err(|e| e.to_string())?;
    for (p, r) in patches.iter().zip(&regions) {
        for i in 0..130 {
            for j in 0..130 {
                for c in 0..3 {
                    ensure(p.get(i, j, c) == image.get(r.row0 + i, r.col0 + j, c), format!("pixel mismatch in {}", r.name()))?;
                }
            }
        }
    }
    // horizontal and vertical neighbours share a 36-pixel band
    let overlap_cols = regions[0].col0 + regions[0].width - regions[1].col0;
    let overlap_rows = regions[0].row0 + regions[0].height - regions[2].row0;
    ensure(overlap_cols == 36 && overlap_rows == 36, format!("overlap {overlap_rows}x{overlap_cols}"))?;
    for i in 0..130 {
        for j in 0..36 {
            ensure(patches[0].get(i, 94 + j, 0) == patches[1].get(i, j, 0), "column band differs")?;
            ensure(patches[0].get(94 + j, i, 0) == patches[2].get(j, i, 0), "row band differs")?;
        }
    }
    let ratio: f64 = patch_area_ratio(224.0, 4.0, 18.0).map_err(|e| e.to_string())?;
    let exact = 130.0f64 * 130.0 / (224.0 * 224.0);
    ensure((ratio - exact).abs() <= 1e-12, format!("ratio {ratio} vs {exact}"))?;
    Ok(format!("5 patches of 130x130, 36-pixel overlap, area ratio {ratio:.9}"))
}

fn planner_runtime_agreement() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA6);
    let mut max_tunnels = 0;
    for i in 0..20 {
        let net = synth::random_network(&NetLimits::default(), &mut rng);
        max_tunnels = max_tunnels.max(net.tunnels.len());
        let weights: NetworkWeights<f32> = synth::network_weights(&net, &mut rng);
        let image: Tensor<f32> = synth::unit_image(net.input, &mut rng);
        let elem = [1, 2, 4][i % 3];
        let probe = plan_network(&net, &MemoryBudget::new(u64::MAX, elem).unwrap(), ExecMode::Reordered)
            .map_err(|e| e.to_string())?;
        let budget_bytes = probe.peak_bytes + rng.gen_range(0..64);
        let budget = MemoryBudget::new(budget_bytes, elem).unwrap();
        let plan = plan_network(&net, &budget, ExecMode::Reordered).map_err(|e| e.to_string())?;
        let (_, trace) = execute_network(&net, &weights, &image, &budget).map_err(|e| format!("net {i}: {e}"))?;
        ensure(
            trace.high_water_bytes == plan.peak_bytes,
            format!("net {i}: high water {} vs plan {}", trace.high_water_bytes, plan.peak_bytes),
        )?;
        ensure(trace.high_water_bytes <= budget_bytes, format!("net {i}: over budget"))?;
    }
    Ok(format!("20 nets (up to {max_tunnels} tunnels), high water equals plan peak"))
}

fn margin_monotonicity() -> Outcome {
    let mut peaks = Vec::new();
    for m in [0, 5, 10, 18] {
        let mut net = synth::toy_network();
        net.input = TensorShape { h: 64, w: 64, c: 3 };
        net.layout.m_h = m;
        net.layout.m_w = m;
        peaks.push(plan_network(&net, &unlimited(), ExecMode::Reordered).map_err(|e| e.to_string())?.peak_bytes);
    }
    ensure(peaks.windows(2).all(|p| p[0] <= p[1]), format!("peaks {peaks:?}"))?;
    Ok(format!("peaks {peaks:?} for m = 0, 5, 10, 18"))
}

fn central_ablation() -> Outcome {
    let with = synth::toy_network();
    let without = with.without_central();
    ensure(without.tunnels.len() == with.layout.k, format!("{} tunnels", without.tunnels.len()))?;
    let (wa, wb) = (with.weight_count().map_err(|e| e.to_string())?, without.weight_count().map_err(|e| e.to_string())?);
    ensure(wb < wa, format!("weights {wb} vs {wa}"))?;
    let pa = plan_network(&with, &unlimited(), ExecMode::Reordered).map_err(|e| e.to_string())?;
    let pb = plan_network(&without, &unlimited(), ExecMode::Reordered).map_err(|e| e.to_string())?;
    ensure(pa.peak().tunnel.is_some_and(|t| t < with.layout.k), "peak op is not in a grid tunnel")?;
    ensure(pa.peak_bytes == pb.peak_bytes, format!("peaks {} vs {}", pa.peak_bytes, pb.peak_bytes))?;
    Ok(format!("{} tunnels, weights {wa} -> {wb}, peak {} bytes unchanged", without.tunnels.len(), pa.peak_bytes))
}

fn format_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA9);
    for i in 0..20 {
        let net = synth::random_network(&NetLimits::default(), &mut rng);
        let text = serialize_spec(&net);
        let back = load_spec(text.as_bytes()).map_err(|e| format!("net {i}: {e}"))?;
        ensure(back == net && serialize_spec(&back) == text, format!("net {i}: spec round trip"))?;
        let weights: NetworkWeights<f32> = synth::network_weights(&net, &mut rng);
        let blob = save_weights(&weights, &net).map_err(|e| e.to_string())?;
        let loaded = load_weights(&blob, &net).map_err(|e| e.to_string())?;
        ensure(save_weights(&loaded, &net).map_err(|e| e.to_string())? == blob, format!("net {i}: blob differs"))?;
    }

    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let golden = std::fs::read(dir.join("toy_run.stdout")).map_err(|e| e.to_string())?;
    for _ in 0..2 {
        let out = Command::new(env!("CARGO_BIN_EXE_patchtunnel"))
            .args(["run", "--model"])
            .arg(dir.join("toy.json"))
            .arg("--weights")
            .arg(dir.join("toy.weights"))
            .arg("--image")
            .arg(dir.join("toy.ppm"))
            .args(["--budget", "262144"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())?;
        ensure(out.stdout == golden, "run stdout differs from golden file")?;
    }
    Ok("20 spec and weight round trips, golden stdout matched twice".into())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("reordering equivalence", 30, reordering_equivalence),
        ("peak invariance over t", 1, peak_invariance_over_t),
        ("worked example footprint", 1, worked_example),
        ("accounting ratio", 5, accounting_ratio),
        ("segmentation geometry", 1, segmentation_geometry),
        ("planner-runtime agreement", 60, planner_runtime_agreement),
        ("margin monotonicity", 1, margin_monotonicity),
        ("central-patch ablation", 1, central_ablation),
        ("format round-trips", 5, format_round_trips),
    ];
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > Duration::from_secs(*limit) => Err(format!("{detail}; exceeded {limit}s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({:.2?})", i + 1, took),
            Err(why) => {
                failed += 1;
                println!("FAIL [{}] {name}: {why} ({:.2?})", i + 1, took);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
