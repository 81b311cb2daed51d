"""Static activation-memory planner.

Places every activation tensor of a sequential graph into one
contiguous arena using greedy liveness-based first-fit: while layer k
runs, only its input and output tensors are live.
"""

from dataclasses import dataclass

from .errors import ConfigError
from .graph import INPUT_HW, _spatial_after, count_params

ALIGN = 4


@dataclass
class ArenaPlan:
    tensor_offsets: list
    tensor_bytes: list
    total_bytes: int
    weight_bytes: int

    def step_intervals(self):
        """Per execution step, the (offset, size) of input and output."""
        steps = []
        for k in range(len(self.tensor_offsets) - 1):
            steps.append(
                (
                    (self.tensor_offsets[k], self.tensor_bytes[k]),
                    (self.tensor_offsets[k + 1], self.tensor_bytes[k + 1]),
                )
            )
        return steps


def _align_up(v):
    return (v + ALIGN - 1) // ALIGN * ALIGN


def tensor_sizes(descs, input_channels, element_bytes, input_hw=INPUT_HW):
    """Byte size of the input tensor and every layer output."""
    h, w = input_hw
    sizes = [input_channels * h * w * element_bytes]
    for desc in descs:
        h, w = _spatial_after(h, w, desc.stride)
        sizes.append(desc.out_channels * h * w * element_bytes)
    return sizes


def _plan(descs, input_channels, element_bytes, weight_bytes, input_hw):
    sizes = tensor_sizes(descs, input_channels, element_bytes, input_hw)
    offsets = [0]
    total = sizes[0]
    for k in range(1, len(sizes)):
        # only the previous tensor is live while this one is produced
        live_start, live_end = offsets[k - 1], offsets[k - 1] + sizes[k - 1]
        candidate = 0
        if candidate + sizes[k] > live_start:
            candidate = _align_up(live_end)
        offsets.append(candidate)
        total = max(total, candidate + sizes[k])
    return ArenaPlan(
        tensor_offsets=offsets,
        tensor_bytes=sizes,
        total_bytes=total,
        weight_bytes=weight_bytes,
    )


def plan_memory(graph, element_bytes, input_hw=INPUT_HW):
    """Arena plan for a ModelGraph at f32 (4) or int8 (1) element size."""
    if element_bytes not in (1, 4):
        raise ConfigError("element_bytes must be 1 (int8) or 4 (f32)")
    return _plan(
        graph.layers,
        graph.input_channels,
        element_bytes,
        count_params(graph) * element_bytes,
        input_hw,
    )


def plan_memory_quantized(qm, input_hw=INPUT_HW):
    """Arena plan for a QuantizedModel: int8 activations, weight bytes
    counted as stored (int8 weights + int32 biases)."""
    descs = [ql.desc for ql in qm.layers]
    weight_bytes = sum(ql.w.size + 4 * ql.bias.size for ql in qm.layers)
    return _plan(descs, qm.input_channels, 1, weight_bytes, input_hw)


def overlapping_steps(plan):
    """Steps whose live input/output intervals overlap (must be none)."""
    bad = []
    for k, ((ao, asz), (bo, bsz)) in enumerate(plan.step_intervals()):
        if ao < bo + bsz and bo < ao + asz:
            bad.append(k)
    return bad
