//! Arena-backed inference: segment, run every tunnel in turn, sum the pooled
//! tunnel features, apply the fully connected head.
//!
//! Arena layout during a tunnel, bottom to top: head accumulator, current
//! activation, next activation (plus the two single-channel planes inside a
//! bottleneck). After each op the consumed activation is released and the
//! new one slides into its slot.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arena::{Arena, Frame};
use crate::bottleneck::{bottleneck_standard, reordered_in_arena, BottleneckSpec, BottleneckWeights};
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, NetworkWeights, OpKind, TunnelSpec, TunnelWeights};
use crate::planner::MemoryBudget;
use crate::scalar::Scalar;
use crate::segmentation::{extract_patches, plan_regions};
use crate::synth;
use crate::tensor::{conv2d_direct, relu6, Tensor, TensorShape};

pub fn make_arena<T: Scalar>(budget: &MemoryBudget) -> Arena<T> {
    Arena::new(budget.budget_bytes, budget.elem)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceRecord {
    pub tunnel: Option<usize>,
    pub op: String,
    pub allocated_bytes: u64,
    pub freed_bytes: u64,
    /// Highest cursor reached while this step ran.
    pub peak_bytes: u64,
    pub cursor_after: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct ExecutionTrace {
    pub records: Vec<TraceRecord>,
    pub high_water_bytes: u64,
}

impl ExecutionTrace {
    /// Re-derives the high-water mark from the records, checking that the
    /// cursor bookkeeping is consistent step to step.
    pub fn replay(&self) -> Result<u64> {
        let mut cursor = 0u64;
        let mut high = 0u64;
        for r in &self.records {
            let next = (cursor + r.allocated_bytes)
                .checked_sub(r.freed_bytes)
                .ok_or_else(|| Error::ArenaMisuse(format!("{}: frees more than allocated", r.op)))?;
            if next != r.cursor_after || r.peak_bytes < cursor.max(next) {
                return Err(Error::ArenaMisuse(format!("{}: inconsistent trace record", r.op)));
            }
            cursor = next;
            high = high.max(r.peak_bytes);
        }
        Ok(high)
    }
}

struct Recorder<'a, T> {
    arena: &'a mut Arena<T>,
    trace: Option<&'a mut ExecutionTrace>,
    before: (u64, u64),
}

impl<'a, T: Scalar> Recorder<'a, T> {
    fn new(arena: &'a mut Arena<T>, trace: Option<&'a mut ExecutionTrace>) -> Self {
        Self { arena, trace, before: (0, 0) }
    }

    fn begin(&mut self) {
        let s = self.arena.stats();
        self.before = (s.allocated_bytes, s.freed_bytes);
        self.arena.begin_window();
    }

    fn end(&mut self, tunnel: Option<usize>, op: &str) {
        if let Some(trace) = self.trace.as_deref_mut() {
            let s = self.arena.stats();
            trace.records.push(TraceRecord {
                tunnel,
                op: op.to_string(),
                allocated_bytes: s.allocated_bytes - self.before.0,
                freed_bytes: s.freed_bytes - self.before.1,
                peak_bytes: self.arena.window_peak_bytes(),
                cursor_after: self.arena.cursor_bytes(),
            });
            trace.high_water_bytes = trace.high_water_bytes.max(self.arena.window_peak_bytes());
        }
    }
}

fn tag(op: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::ArenaOverflow { .. } => Error::BudgetExceeded { op: op.to_string(), source: Box::new(e) },
        other => other,
    }
}

/// Runs one tunnel on `patch` and adds its pooled features into `acc`.
/// The arena is back at its entry cursor on success.
fn run_tunnel_into<T: Scalar>(
    rec: &mut Recorder<'_, T>,
    acc: Frame,
    tunnel_id: Option<usize>,
    patch: &Tensor<T>,
    spec: &TunnelSpec,
    weights: &TunnelWeights<T>,
) -> Result<()> {
    let steps = spec.walk(patch.shape())?;
    weights.check(spec, patch.shape().c)?;
    let prefix = tunnel_id.map_or_else(String::new, |t| format!("tunnel {t} / "));

    let load = format!("{prefix}load patch");
    rec.begin();
    let mut current = rec.arena.alloc(patch.shape().len()).map_err(tag(&load))?;
    rec.arena.slice_mut(current)?.copy_from_slice(patch.data());
    rec.end(tunnel_id, &load);

    let mut bottlenecks = weights.bottlenecks.iter();
    for step in &steps {
        let label = format!("{prefix}{}", step.label());
        rec.begin();
        let produced = match step.kind {
            OpKind::Stem(params) => {
                let stem_w = weights.stem.as_ref().expect("checked above");
                rec.arena.alloc(step.out_shape.len()).and_then(|out| {
                    let [x, y] = rec.arena.slices_mut([current, out])?;
                    conv2d_direct(x, step.in_shape, &stem_w.kernel, &params, y, step.out_shape);
                    if let (Some(a), Some(p)) = (spec.stem.and_then(|s| s.affine), &stem_w.affine) {
                        for pixel in y.chunks_exact_mut(params.c_out) {
                            for ((v, &sc), &b) in pixel.iter_mut().zip(&p.scale).zip(&p.bias) {
                                let z = sc * *v + b;
                                *v = if a.relu6 { relu6(z) } else { z };
                            }
                        }
                    }
                    Ok(out)
                })
            }
            OpKind::Bottleneck(b) => {
                let w = bottlenecks.next().expect("checked above");
                reordered_in_arena(rec.arena, current, step.in_shape, &b, w)
            }
        };
        let out = match produced {
            Ok(f) => f,
            Err(e) => {
                rec.arena.free(current)?;
                return Err(tag(&label)(e));
            }
        };
        current = rec.arena.free_under_top(current, out)?;
        rec.end(tunnel_id, &label);
    }

    let pool = format!("{prefix}pool");
    rec.begin();
    let final_shape = steps.last().map_or(patch.shape(), |s| s.out_shape);
    {
        let [sum, act] = rec.arena.slices_mut([acc, current])?;
        global_avg_pool_into(act, final_shape, sum);
    }
    rec.arena.free(current)?;
    rec.end(tunnel_id, &pool);
    Ok(())
}

/// `acc[c] += mean over pixels of act[.., c]`.
fn global_avg_pool_into<T: Scalar>(act: &[T], shape: TensorShape, acc: &mut [T]) {
    let mut sums = vec![T::zero(); shape.c];
    for pixel in act.chunks_exact(shape.c) {
        for (s, &v) in sums.iter_mut().zip(pixel) {
            *s += v;
        }
    }
    let n = T::from_real(shape.plane() as f64);
    for (a, s) in acc.iter_mut().zip(sums) {
        *a += s / n;
    }
}

/// One tunnel end to end, returning its pooled feature vector. The pooled
/// vector itself is allocated in the arena for the duration of the call.
pub fn run_tunnel<T: Scalar>(
    patch: &Tensor<T>,
    spec: &TunnelSpec,
    weights: &TunnelWeights<T>,
    arena: &mut Arena<T>,
) -> Result<Vec<T>> {
    let c_final = spec.output_shape(patch.shape())?.c;
    let acc = arena.alloc(c_final).map_err(tag("pooled features"))?;
    let mut rec = Recorder::new(arena, None);
    let outcome = run_tunnel_into(&mut rec, acc, None, patch, spec, weights);
    let features = arena.slice(acc)?.to_vec();
    arena.free(acc)?;
    outcome.map(|_| features)
}

/// Full inference with tunnels in declaration order.
pub fn execute_network<T: Scalar>(
    net: &NetworkSpec,
    weights: &NetworkWeights<T>,
    image: &Tensor<T>,
    budget: &MemoryBudget,
) -> Result<(Vec<T>, ExecutionTrace)> {
    let order: Vec<usize> = (0..net.tunnels.len()).collect();
    execute_network_in_order(net, weights, image, budget, &order)
}

/// Full inference with tunnels visited in `order` (a permutation of the
/// tunnel indices). Aborts the whole inference on any failure.
pub fn execute_network_in_order<T: Scalar>(
    net: &NetworkSpec,
    weights: &NetworkWeights<T>,
    image: &Tensor<T>,
    budget: &MemoryBudget,
    order: &[usize],
) -> Result<(Vec<T>, ExecutionTrace)> {
    let c_final = net.validate()?;
    weights.check(net)?;
    if image.shape() != net.input {
        return Err(Error::ShapeMismatch(format!(
            "image is {}, network expects {}",
            image.shape(),
            net.input
        )));
    }
    let mut seen = vec![false; net.tunnels.len()];
    if order.len() != seen.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
        return Err(Error::InvalidNetwork("tunnel order must be a permutation".into()));
    }

    let regions = plan_regions(image.shape(), &net.layout)?;
    let mut arena = make_arena::<T>(budget);
    let mut trace = ExecutionTrace::default();
    let mut rec = Recorder::new(&mut arena, Some(&mut trace));

    rec.begin();
    let acc = rec.arena.alloc(c_final).map_err(tag("head accumulator"))?;
    rec.end(None, "head accumulator");

    for &ti in order {
        let patch = extract_patches(image, &regions[ti..=ti])?.remove(0);
        run_tunnel_into(&mut rec, acc, Some(ti), &patch, &net.tunnels[ti], &weights.tunnels[ti])?;
    }

    let classes = net.head.classes;
    rec.begin();
    let scores_frame = rec.arena.alloc(classes).map_err(tag("head"))?;
    {
        let [sum, scores] = rec.arena.slices_mut([acc, scores_frame])?;
        for (j, out) in scores.iter_mut().enumerate() {
            let mut v = T::zero();
            for (i, &f) in sum.iter().enumerate() {
                v += f * weights.fc[i * classes + j];
            }
            *out = v;
        }
    }
    let scores = rec.arena.slice(scores_frame)?.to_vec();
    rec.arena.free(scores_frame)?;
    rec.arena.free(acc)?;
    rec.end(None, "head");
    Ok((scores, trace))
}

/// Maximum elementwise deviation relative to the largest reference
/// magnitude: `max|a - b| / max|b|` (0 when both are identically zero).
pub fn relative_linf<A: Scalar, B: Scalar>(candidate: &[A], reference: &[B]) -> f64 {
    assert_eq!(candidate.len(), reference.len(), "length mismatch");
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (a, b) in candidate.iter().zip(reference) {
        let (a, b) = (a.as_f64(), b.as_f64());
        diff = diff.max((a - b).abs());
        scale = scale.max(b.abs());
    }
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub trials: usize,
    pub max_rel_dev: f64,
    pub tol: f64,
    pub pass: bool,
}

/// Reordered execution in `f32` against the standard order computed in
/// `f64` on the same input and weights.
pub fn compare_orders(x: &Tensor<f64>, spec: &BottleneckSpec, w: &BottleneckWeights<f64>) -> Result<f64> {
    let reference = bottleneck_standard(x, spec, w)?;
    let mut arena = Arena::<f32>::unbounded(Default::default());
    let candidate = crate::bottleneck::bottleneck_reordered(&x.cast::<f32>(), spec, &w.cast::<f32>(), &mut arena)?;
    Ok(relative_linf(candidate.data(), reference.data()))
}

/// Seeded randomized comparison of the two execution orders.
pub fn verify_equivalence(
    spec: &BottleneckSpec,
    shape: TensorShape,
    trials: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport> {
    spec.output_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_dev = 0.0f64;
    for _ in 0..trials {
        let x = synth::normal_tensor::<f64, _>(shape, &mut rng);
        let w = synth::bottleneck_weights::<f64, _>(spec, &mut rng);
        max_rel_dev = max_rel_dev.max(compare_orders(&x, spec, &w)?);
    }
    Ok(EquivalenceReport {
        trials,
        max_rel_dev,
        tol,
        pass: max_rel_dev <= tol,
    })
}
