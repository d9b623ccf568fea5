//! Static peak-activation accounting.
//!
//! Only activations are counted; weights are assumed to live in flash.
//! A plain convolution needs its input and output resident at once. A
//! reordered bottleneck needs its input, its output, and one plane each of
//! the expansion and depth-wise stages. Tunnels run one after another, and
//! the pooled head accumulator (`c_final` elements) stays resident for the
//! whole inference.

use serde::{Deserialize, Serialize};

use crate::bottleneck::bottleneck_footprint;
use crate::error::{Error, Result};
use crate::network::{NetworkSpec, OpKind};
use crate::tensor::{ConvParams, ElemKind, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Standard,
    #[default]
    Reordered,
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecMode::Standard => "standard",
            ExecMode::Reordered => "reordered",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryBudget {
    pub budget_bytes: u64,
    pub elem: ElemKind,
}

impl MemoryBudget {
    pub fn new(budget_bytes: u64, elem_bytes: u32) -> Result<Self> {
        if budget_bytes == 0 {
            return Err(Error::InvalidBudget("budget must be at least one byte".into()));
        }
        Ok(Self {
            budget_bytes,
            elem: ElemKind::from_bytes(elem_bytes)?,
        })
    }

    pub fn elem_bytes(&self) -> u64 {
        self.elem.bytes()
    }

    /// Whole elements that fit in the budget.
    pub fn budget_elements(&self) -> u64 {
        self.budget_bytes / self.elem.bytes()
    }
}

/// Dimensions entering the reordered-bottleneck footprint, and its total.
///
/// `h_p x w_p` is the expansion-stage plane, `h_d x w_d` the depth-wise
/// plane; in reordered mode each holds a single channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BottleneckFootprint {
    pub mode: ExecMode,
    pub h_i: usize,
    pub w_i: usize,
    pub c_i: usize,
    pub h_p: usize,
    pub w_p: usize,
    pub h_d: usize,
    pub w_d: usize,
    pub h_o: usize,
    pub w_o: usize,
    pub c_o: usize,
    pub total_elements: u64,
}

/// Input plus output elements of one convolution layer.
pub fn layer_footprint(in_shape: TensorShape, params: &ConvParams) -> Result<u64> {
    let out = params.output_shape(in_shape)?;
    let overflow = || Error::Overflow(format!("layer footprint on {in_shape}"));
    let input = (in_shape.plane() as u64)
        .checked_mul(in_shape.c as u64)
        .ok_or_else(overflow)?;
    let output = (out.plane() as u64)
        .checked_mul(out.c as u64)
        .ok_or_else(overflow)?;
    input.checked_add(output).ok_or_else(overflow)
}

/// Largest `c_out` whose layer footprint fits the budget.
pub fn max_cout_under_budget(
    in_shape: TensorShape,
    k_h: usize,
    k_w: usize,
    s: usize,
    p_h: usize,
    p_w: usize,
    budget: &MemoryBudget,
) -> Result<usize> {
    let probe = ConvParams { k_h, k_w, s, p_h, p_w, c_in: in_shape.c, c_out: 1 };
    let out_plane = probe.output_shape(in_shape)?.plane() as u64;
    let input = in_shape.len() as u64;
    let available = budget.budget_elements();
    if available < input + out_plane {
        return Err(Error::Infeasible(format!(
            "{in_shape} input plus one output channel needs {} elements, budget holds {available}",
            input + out_plane
        )));
    }
    Ok(((available - input) / out_plane) as usize)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OpFootprint {
    /// `None` for the head.
    pub tunnel: Option<usize>,
    pub label: String,
    pub elements: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemoryPlan {
    pub mode: ExecMode,
    pub elem_bytes: u64,
    pub budget_bytes: u64,
    /// Head accumulator, live for the whole inference.
    pub resident_elements: u64,
    pub per_op: Vec<OpFootprint>,
    pub peak_elements: u64,
    pub peak_bytes: u64,
    pub peak_op: usize,
    pub within_budget: bool,
}

impl MemoryPlan {
    pub fn peak(&self) -> &OpFootprint {
        &self.per_op[self.peak_op]
    }

    /// Peak bytes if `degree` tunnels ran concurrently. Only meaningful as a
    /// what-if figure; budgeted execution is always sequential.
    pub fn parallel_peak_bytes(&self, degree: u64) -> u64 {
        let tunnel_max = self
            .per_op
            .iter()
            .filter(|op| op.tunnel.is_some())
            .map(|op| op.elements)
            .max()
            .unwrap_or(0);
        let head = self
            .per_op
            .iter()
            .filter(|op| op.tunnel.is_none())
            .map(|op| op.elements)
            .max()
            .unwrap_or(0);
        let transient = tunnel_max.saturating_mul(degree).max(head);
        self.resident_elements
            .saturating_add(transient)
            .saturating_mul(self.elem_bytes)
    }
}

/// Per-op footprints over every tunnel in execution order, then the head.
pub fn plan_network(net: &NetworkSpec, budget: &MemoryBudget, mode: ExecMode) -> Result<MemoryPlan> {
    let c_final = net.validate()?;
    let patch = net.patch_shape()?;
    let elem_bytes = budget.elem_bytes();
    let to_bytes = |elements: u64| {
        elements
            .checked_mul(elem_bytes)
            .ok_or_else(|| Error::Overflow("byte conversion".into()))
    };

    let mut per_op = Vec::new();
    for (ti, tunnel) in net.tunnels.iter().enumerate() {
        for step in tunnel.walk(patch)? {
            let elements = match step.kind {
                OpKind::Stem(params) => layer_footprint(step.in_shape, &params)?,
                OpKind::Bottleneck(spec) => {
                    bottleneck_footprint(&spec, step.in_shape, mode)?.total_elements
                }
            };
            per_op.push(OpFootprint {
                tunnel: Some(ti),
                label: format!("tunnel {ti} / {}", step.label()),
                elements,
                bytes: to_bytes(elements)?,
            });
        }
    }
    let head = net.head.classes as u64;
    per_op.push(OpFootprint {
        tunnel: None,
        label: "head".into(),
        elements: head,
        bytes: to_bytes(head)?,
    });

    // first maximum wins so the report is stable
    let mut peak_op = 0;
    for (i, op) in per_op.iter().enumerate() {
        if op.elements > per_op[peak_op].elements {
            peak_op = i;
        }
    }
    let resident_elements = c_final as u64;
    let peak_elements = per_op[peak_op]
        .elements
        .checked_add(resident_elements)
        .ok_or_else(|| Error::Overflow("peak".into()))?;
    let peak_bytes = to_bytes(peak_elements)?;
    Ok(MemoryPlan {
        mode,
        elem_bytes,
        budget_bytes: budget.budget_bytes,
        resident_elements,
        per_op,
        peak_elements,
        peak_bytes,
        peak_op,
        within_budget: peak_bytes <= budget.budget_bytes,
    })
}
