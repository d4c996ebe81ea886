"""The three counting networks and their exact backward pass.

All variants share the same 8-block fully convolutional trunk:

    block  layer stack                 out_ch  resolution (input H x W)
    1      conv3 -> relu -> pool       32      H/2
    2      conv3 -> relu -> pool       64      H/4
    3      conv3 -> relu -> pool       128     H/8
    4      conv3 -> relu               512     H/8
    5      up -> [concat] -> conv3 -> relu  128   H/4
    6      up -> [concat] -> conv3 -> relu  64    H/2
    7      up -> [concat] -> conv3 -> relu  32    H
    8      conv1 -> relu               1       H

"pricnn_only" and "pricnn_aux" concatenate the pre-pool activations of blocks
3/2/1 into blocks 5/6/7 (upsampled channels first); "fcrn" has no skips.
"pricnn_aux" additionally attaches a two-layer head (conv3x3 -> relu ->
conv1x1 -> relu, 32 hidden channels) to the feature maps after blocks 4, 5
and 6, predicting density at 1/8, 1/4 and 1/2 resolution for training-time
supervision only.

Parameters are partitioned into seven groups that mirror which losses reach
them: trunk blocks 1-4, block 5, block 6, blocks 7-8, and one group per aux
head.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .ops import (
    ConvFilter,
    concat_channels,
    conv2d,
    conv2d_backward,
    init_conv_filter,
    maxpool2x2_backward,
    maxpool2x2_indices,
    relu,
    relu_backward,
    split_channels,
    upsample2x_bilinear,
    upsample2x_bilinear_backward,
)

VARIANTS = ("fcrn", "pricnn_only", "pricnn_aux")

# Out-channels of the eight trunk convolutions.
BLOCK_CHANNELS = (32, 64, 128, 512, 128, 64, 32, 1)
AUX_HIDDEN_CHANNELS = 32

# Block resolutions the aux heads tap, as downsampling factors of the input.
AUX_FACTORS = ((8, 8), (4, 4), (2, 2))

PARAM_GROUPS = (
    "blocks1to4",
    "block5",
    "block6",
    "blocks7to8",
    "auxhead1",
    "auxhead2",
    "auxhead3",
)


class LayerSpec(NamedTuple):
    name: str
    out_channels: int
    in_channels: int
    kernel_size: int
    group: str


def has_skips(variant: str) -> bool:
    _check_variant(variant)
    return variant in ("pricnn_only", "pricnn_aux")


def has_aux_heads(variant: str) -> bool:
    _check_variant(variant)
    return variant == "pricnn_aux"


def _check_variant(variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}, expected one of {VARIANTS}")


def layer_specs(variant: str) -> list:
    """Canonical layer list for a variant: trunk blocks 1..8, then aux heads.

    This single table drives construction, parameter grouping and the
    checkpoint shape validation.
    """
    skips = has_skips(variant)
    # Channels arriving at the decoder convs: upsampled features plus, for
    # skip variants, the matching encoder pre-pool activation.
    dec_in = {
        5: BLOCK_CHANNELS[3] + (BLOCK_CHANNELS[2] if skips else 0),
        6: BLOCK_CHANNELS[4] + (BLOCK_CHANNELS[1] if skips else 0),
        7: BLOCK_CHANNELS[5] + (BLOCK_CHANNELS[0] if skips else 0),
    }
    in_ch = {
        1: 1,
        2: BLOCK_CHANNELS[0],
        3: BLOCK_CHANNELS[1],
        4: BLOCK_CHANNELS[2],
        5: dec_in[5],
        6: dec_in[6],
        7: dec_in[7],
        8: BLOCK_CHANNELS[6],
    }
    group = {1: "blocks1to4", 2: "blocks1to4", 3: "blocks1to4", 4: "blocks1to4",
             5: "block5", 6: "block6", 7: "blocks7to8", 8: "blocks7to8"}
    specs = [
        LayerSpec(f"block{b}", BLOCK_CHANNELS[b - 1], in_ch[b], 1 if b == 8 else 3, group[b])
        for b in range(1, 9)
    ]
    if has_aux_heads(variant):
        tap_channels = (BLOCK_CHANNELS[3], BLOCK_CHANNELS[4], BLOCK_CHANNELS[5])
        for k in range(1, 4):
            specs.append(
                LayerSpec(f"aux{k}.conv1", AUX_HIDDEN_CHANNELS, tap_channels[k - 1], 3, f"auxhead{k}")
            )
            specs.append(LayerSpec(f"aux{k}.conv2", 1, AUX_HIDDEN_CHANNELS, 1, f"auxhead{k}"))
    return specs


class ModelParams:
    """Ordered, named, grouped collection of the trainable filters."""

    def __init__(self, variant: str, layers: dict):
        _check_variant(variant)
        self.variant = variant
        self.layers = dict(layers)
        self.groups = {spec.name: spec.group for spec in layer_specs(variant)}
        if list(self.layers) != [spec.name for spec in layer_specs(variant)]:
            raise ValueError("layer names/order do not match the variant's layout")

    def tensors(self):
        """Yield (name, array) in canonical order: layer order, weight then bias."""
        for name, filt in self.layers.items():
            yield f"{name}.weight", filt.weights
            yield f"{name}.bias", filt.bias

    def tensor_dict(self) -> dict:
        return dict(self.tensors())

    def group_of_tensor(self, tensor_name: str) -> str:
        return self.groups[tensor_name.rsplit(".", 1)[0]]

    def group_tensors(self, group: str) -> dict:
        if group not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        return {n: t for n, t in self.tensors() if self.group_of_tensor(n) == group}

    def active_groups(self) -> tuple:
        present = set(self.groups.values())
        return tuple(g for g in PARAM_GROUPS if g in present)

    def total_count(self) -> int:
        return sum(t.size for _, t in self.tensors())

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            {n: ConvFilter(f.weights.copy(), f.bias.copy()) for n, f in self.layers.items()},
        )

    def zeros_like(self) -> "ModelParams":
        return ModelParams(
            self.variant,
            {
                n: ConvFilter(np.zeros_like(f.weights), np.zeros_like(f.bias))
                for n, f in self.layers.items()
            },
        )


def build_model(variant: str, rng: np.random.Generator) -> ModelParams:
    """Fresh orthogonally-initialized parameters.

    Layers consume the generator in canonical order (trunk blocks first, aux
    heads last), so the trunk weights of pricnn_only and pricnn_aux built from
    the same seed are bitwise identical.
    """
    layers = {
        spec.name: init_conv_filter(spec.out_channels, spec.in_channels, spec.kernel_size, rng)
        for spec in layer_specs(variant)
    }
    return ModelParams(variant, layers)


@dataclass
class ForwardOutputs:
    """Full-resolution density estimate plus the aux-head views.

    features holds the maps tapped after blocks 4, 5 and 6 (the aux head
    inputs); aux holds the three low-resolution density estimates for the
    pricnn_aux variant and is None otherwise.
    """

    y_hat: np.ndarray
    aux: tuple | None
    features: tuple


def forward(params: ModelParams, x: np.ndarray, want_cache: bool = False):
    """Evaluate the network. Returns ForwardOutputs, or (outputs, cache) when
    want_cache is set; the cache feeds backward()."""
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected input of shape (B, 1, H, W), got {x.shape}")
    h, w = x.shape[2], x.shape[3]
    if h % 8 or w % 8:
        raise ValueError(f"spatial dims must be divisible by 8, got {h}x{w}")

    skips = has_skips(params.variant)
    layers = params.layers
    cache = {"x": x}

    # Encoder: three conv/relu/pool blocks, keeping the pre-pool activations.
    pooled = x
    pre_pool = []
    for b in (1, 2, 3):
        cache[f"block{b}.in"] = pooled
        act = relu(conv2d(pooled, layers[f"block{b}"]))
        cache[f"block{b}.out"] = act
        pre_pool.append(act)
        pooled, idx = maxpool2x2_indices(act)
        cache[f"block{b}.poolidx"] = idx

    cache["block4.in"] = pooled
    f4 = relu(conv2d(pooled, layers["block4"]))
    cache["block4.out"] = f4

    # Decoder: upsample, merge the matching encoder activation, convolve.
    def decode(block: int, feat: np.ndarray, skip: np.ndarray | None):
        up = upsample2x_bilinear(feat)
        merged = concat_channels(up, skip) if skips else up
        cache[f"block{block}.in"] = merged
        out = relu(conv2d(merged, layers[f"block{block}"]))
        cache[f"block{block}.out"] = out
        return out

    f5 = decode(5, f4, pre_pool[2])
    f6 = decode(6, f5, pre_pool[1])
    h7 = decode(7, f6, pre_pool[0])

    cache["block8.in"] = h7
    y_hat = relu(conv2d(h7, layers["block8"]))
    cache["block8.out"] = y_hat

    aux = None
    if has_aux_heads(params.variant):
        maps = []
        for k, feat in enumerate((f4, f5, f6), start=1):
            hidden = relu(conv2d(feat, layers[f"aux{k}.conv1"]))
            cache[f"aux{k}.hidden"] = hidden
            out = relu(conv2d(hidden, layers[f"aux{k}.conv2"]))
            cache[f"aux{k}.out"] = out
            maps.append(out)
        aux = tuple(maps)

    outputs = ForwardOutputs(y_hat=y_hat, aux=aux, features=(f4, f5, f6))
    return (outputs, cache) if want_cache else outputs


def _aux_head_backward(params, cache, k, grad_aux, grads):
    """Backprop one aux head; returns the gradient w.r.t. its tapped feature."""
    layers = params.layers
    g = relu_backward(cache[f"aux{k}.out"], grad_aux)
    d_hidden, dw2, db2 = conv2d_backward(cache[f"aux{k}.hidden"], layers[f"aux{k}.conv2"], g)
    grads[f"aux{k}.conv2"] = (dw2, db2)
    g = relu_backward(cache[f"aux{k}.hidden"], d_hidden)
    feat = cache["block4.out"] if k == 1 else cache[f"block{3 + k}.out"]
    d_feat, dw1, db1 = conv2d_backward(feat, layers[f"aux{k}.conv1"], g)
    grads[f"aux{k}.conv1"] = (dw1, db1)
    return d_feat


def backward(params: ModelParams, cache: dict, grad_y_hat: np.ndarray, grad_aux=None) -> ModelParams:
    """Exact adjoint of forward(): gradients for every trainable tensor.

    grad_aux is a 3-tuple of upstream gradients for the aux maps (entries may
    be None to skip a head entirely, e.g. when its loss weight is zero); any
    skipped or absent head contributes exactly zero gradient.
    """
    layers = params.layers
    skips = has_skips(params.variant)
    grads: dict = {}

    g = relu_backward(cache["block8.out"], grad_y_hat)
    d_h7, dw, db = conv2d_backward(cache["block8.in"], layers["block8"], g)
    grads["block8"] = (dw, db)

    # Gradients flowing into the encoder pre-pool activations via the skips.
    d_skip = {1: None, 2: None, 3: None}

    def undecode(block: int, d_out: np.ndarray, skip_src: int | None):
        g = relu_backward(cache[f"block{block}.out"], d_out)
        d_in, dw, db = conv2d_backward(cache[f"block{block}.in"], layers[f"block{block}"], g)
        grads[f"block{block}"] = (dw, db)
        if skips:
            d_up, d_sk = split_channels(d_in, d_in.shape[1] - cache[f"block{skip_src}.out"].shape[1])
            d_skip[skip_src] = d_sk
        else:
            d_up = d_in
        return upsample2x_bilinear_backward(d_up)

    d_f6 = undecode(7, d_h7, 1)
    if grad_aux is not None and grad_aux[2] is not None:
        d_f6 = d_f6 + _aux_head_backward(params, cache, 3, grad_aux[2], grads)

    d_f5 = undecode(6, d_f6, 2)
    if grad_aux is not None and grad_aux[1] is not None:
        d_f5 = d_f5 + _aux_head_backward(params, cache, 2, grad_aux[1], grads)

    d_f4 = undecode(5, d_f5, 3)
    if grad_aux is not None and grad_aux[0] is not None:
        d_f4 = d_f4 + _aux_head_backward(params, cache, 1, grad_aux[0], grads)

    g = relu_backward(cache["block4.out"], d_f4)
    d_pooled, dw, db = conv2d_backward(cache["block4.in"], layers["block4"], g)
    grads["block4"] = (dw, db)

    for b in (3, 2, 1):
        d_act = maxpool2x2_backward(cache[f"block{b}.poolidx"], d_pooled)
        if d_skip[b] is not None:
            d_act = d_act + d_skip[b]
        g = relu_backward(cache[f"block{b}.out"], d_act)
        d_pooled, dw, db = conv2d_backward(cache[f"block{b}.in"], layers[f"block{b}"], g)
        grads[f"block{b}"] = (dw, db)

    out_layers = {}
    for spec in layer_specs(params.variant):
        if spec.name in grads:
            dw, db = grads[spec.name]
            out_layers[spec.name] = ConvFilter(dw, db)
        else:
            f = layers[spec.name]
            out_layers[spec.name] = ConvFilter(np.zeros_like(f.weights), np.zeros_like(f.bias))
    return ModelParams(params.variant, out_layers)
