"""Joint loss, SGD loop, k-fold splitting and MAE/STD evaluation."""

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from . import model as model_mod
from .density import count_from_density, gaussian_kernel, render_density_map
from .model import AUX_FACTORS, ForwardOutputs, ModelParams, backward, build_model, forward
from .ops import finite_diff_check


@dataclass
class TrainConfig:
    """Every knob of a training run.

    batch_size defaults to the full-scale value (100); the CLI overrides it
    with a desk-scale default. lambdas weight the three auxiliary losses and
    are only consulted for the pricnn_aux variant. density_scale multiplies
    the training targets and is divided back out when counting.
    """

    variant: str = "pricnn_aux"
    learning_rate: float = 1e-4
    batch_size: int = 100
    epochs: int = 1
    lambdas: tuple = (1.0, 1.0, 1.0)
    sigma: float = 3.0
    kernel_half_width: int = 10
    gtlr_factors: tuple = AUX_FACTORS
    seed: int = 0
    folds: int = 5
    density_scale: float = 1.0
    pixel_mean_loss: bool = False

    def __post_init__(self):
        model_mod._check_variant(self.variant)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if len(self.lambdas) != 3 or any(not 0.0 <= v <= 1.0 for v in self.lambdas):
            raise ValueError("lambdas must be three values in [0, 1]")
        self.gtlr_factors = tuple((int(a), int(b)) for a, b in self.gtlr_factors)
        if self.gtlr_factors != AUX_FACTORS:
            raise ValueError(
                f"gtlr_factors {self.gtlr_factors} do not match the aux head "
                f"resolutions {AUX_FACTORS}"
            )
        if self.density_scale <= 0:
            raise ValueError("density_scale must be positive")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


class LossTerms(NamedTuple):
    primary: float
    aux: tuple  # three unweighted aux MSE terms (0.0 without aux heads)

    def combined(self, lambdas) -> float:
        return self.primary + sum(l * t for l, t in zip(lambdas, self.aux))


def _batch_block_sum(maps: np.ndarray, factors) -> np.ndarray:
    a, b = factors
    n, h, w = maps.shape
    if h % a or w % b:
        raise ValueError(f"maps of {h}x{w} are not divisible by factors ({a}, {b})")
    return (
        maps.reshape(n, h // a, a, w // b, b)
        .sum(axis=(2, 4), dtype=np.float64)
        .astype(np.float32)
    )


def _sq_sum(diff: np.ndarray) -> float:
    d = diff.reshape(-1).astype(np.float64)
    return float(d @ d)


def loss_overall(outputs: ForwardOutputs, targets: np.ndarray, config: TrainConfig):
    """Combined training loss and its per-term breakdown.

    targets is the (B, H, W) batch of full-resolution density maps (already
    scaled by density_scale); the low-resolution targets are derived here by
    block summing. Each term is the squared error summed over pixels and
    averaged over the batch only, unless pixel_mean_loss also averages over
    pixels. Returns (combined, LossTerms).
    """
    targets = np.asarray(targets, dtype=np.float32)
    y = outputs.y_hat
    if targets.ndim != 3 or y.shape != (targets.shape[0], 1, targets.shape[1], targets.shape[2]):
        raise ValueError(
            f"prediction shape {y.shape} does not match target batch {targets.shape}"
        )
    b = targets.shape[0]

    def term(pred, tgt):
        scale = b * (tgt.shape[1] * tgt.shape[2] if config.pixel_mean_loss else 1)
        return _sq_sum(pred[:, 0] - tgt) / scale

    primary = term(y, targets)
    aux_terms = (0.0, 0.0, 0.0)
    if outputs.aux is not None:
        aux_terms = tuple(
            term(outputs.aux[k], _batch_block_sum(targets, config.gtlr_factors[k]))
            for k in range(3)
        )
    terms = LossTerms(primary, aux_terms)
    return terms.combined(config.lambdas), terms


def loss_gradients(outputs: ForwardOutputs, targets: np.ndarray, config: TrainConfig):
    """Upstream gradients of the combined loss w.r.t. y_hat and the aux maps.

    Aux entries are None when the variant has no heads or the corresponding
    lambda is exactly zero (no gradient flows there at all).
    """
    targets = np.asarray(targets, dtype=np.float32)
    b = targets.shape[0]

    def grad(pred, tgt, weight):
        scale = weight * 2.0 / (b * (tgt.shape[1] * tgt.shape[2] if config.pixel_mean_loss else 1))
        return np.float32(scale) * (pred - tgt[:, None])

    d_y = grad(outputs.y_hat, targets, 1.0)
    d_aux = None
    if outputs.aux is not None:
        d_aux = tuple(
            None
            if config.lambdas[k] == 0.0
            else grad(outputs.aux[k], _batch_block_sum(targets, config.gtlr_factors[k]), config.lambdas[k])
            for k in range(3)
        )
    return d_y, d_aux


def sgd_step(params: ModelParams, grads: ModelParams, lr: float) -> ModelParams:
    """In-place plain SGD update p <- p - lr * g over every parameter group."""
    if grads.variant != params.variant:
        raise ValueError("gradient variant does not match the parameters")
    for name, filt in params.layers.items():
        g = grads.layers[name]
        if g.weights.shape != filt.weights.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        filt.weights -= np.float32(lr) * g.weights
        filt.bias -= np.float32(lr) * g.bias
    return params


class TrainRecord(NamedTuple):
    epoch: int
    batch: int
    loss_primary: float
    loss_aux: tuple
    loss_overall: float

    def csv_line(self) -> str:
        return ",".join(
            [str(self.epoch), str(self.batch), repr(self.loss_primary)]
            + [repr(v) for v in self.loss_aux]
            + [repr(self.loss_overall)]
        )


TRAIN_LOG_HEADER = "epoch,batch,L,L1,L2,L3,L_overall"


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    initial_loss: float
    final_loss: float
    converged: bool | None  # None when no convergence target was requested


def render_targets(dataset, config: TrainConfig) -> np.ndarray:
    """Ground-truth density maps for a dataset, scaled by density_scale."""
    kernel = gaussian_kernel(config.sigma, config.kernel_half_width)
    maps = [
        render_density_map(img.image.shape, img.centroids, kernel) for img in dataset
    ]
    out = np.stack(maps)
    if config.density_scale != 1.0:
        out = out * np.float32(config.density_scale)
    return out


def _check_dataset(dataset):
    if not dataset:
        raise ValueError("dataset must not be empty")
    shape = dataset[0].image.shape
    for img in dataset:
        if img.image.shape != shape:
            raise ValueError("all images in a training set must share dimensions")
        if shape[0] % 8 or shape[1] % 8:
            raise ValueError(
                f"image dims must be divisible by 8, got {shape[0]}x{shape[1]} ({img.id})"
            )


def train(
    dataset,
    config: TrainConfig,
    progress: Callable[[TrainRecord], None] | None = None,
    converge_fraction: float | None = None,
) -> TrainResult:
    """Mini-batch SGD over the dataset; fully determined by config.seed.

    Ground-truth maps are rendered once up front. Each epoch reshuffles with
    the data stream of the seeded generator and walks contiguous batches (the
    last short batch is kept). When converge_fraction is given, training stops
    as soon as a batch's combined loss drops below that fraction of the first
    batch's, and the result reports whether that happened.
    """
    _check_dataset(dataset)
    targets = render_targets(dataset, config)
    x_all = np.stack([img.image for img in dataset])[:, None]

    # Independent streams so the trunk init is identical across variants and
    # the shuffle sequence does not depend on how many tensors were drawn.
    rng_init = np.random.default_rng([config.seed, 0])
    rng_data = np.random.default_rng([config.seed, 1])

    params = build_model(config.variant, rng_init)
    history: list[TrainRecord] = []
    initial = None
    converged = False if converge_fraction is not None else None
    n = len(dataset)

    for epoch in range(config.epochs):
        order = rng_data.permutation(n)
        for bi, start in enumerate(range(0, n, config.batch_size)):
            sel = order[start : start + config.batch_size]
            outputs, cache = forward(params, x_all[sel], want_cache=True)
            combined, terms = loss_overall(outputs, targets[sel], config)
            d_y, d_aux = loss_gradients(outputs, targets[sel], config)
            grads = backward(params, cache, d_y, d_aux)
            sgd_step(params, grads, config.learning_rate)

            record = TrainRecord(epoch, bi, terms.primary, terms.aux, combined)
            history.append(record)
            if progress is not None:
                progress(record)
            if initial is None:
                initial = combined
            if converge_fraction is not None and combined < converge_fraction * initial:
                converged = True
                break
        if converged:
            break

    if initial is None:  # zero epochs requested
        initial = float("nan")
        final = float("nan")
    else:
        final = history[-1].loss_overall
    return TrainResult(params, history, initial, final, converged)


def kfold_split(n_items: int, folds: int, seed: int) -> list:
    """Seeded shuffle, then contiguous near-equal validation folds.

    Returns [(train_indices, val_indices)] covering every item exactly once
    on the validation side; fold sizes differ by at most 1.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if n_items < folds:
        raise ValueError(f"cannot split {n_items} items into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n_items)
    base, extra = divmod(n_items, folds)
    splits = []
    start = 0
    for f in range(folds):
        size = base + (1 if f < extra else 0)
        val = perm[start : start + size]
        train_idx = np.concatenate([perm[:start], perm[start + size :]])
        splits.append((train_idx, val))
        start += size
    return splits


class ImageResult(NamedTuple):
    image_id: str
    true_count: float
    estimated_count: float
    abs_error: float


@dataclass
class EvalReport:
    per_image: list
    mae: float
    std: float


def summarize_errors(errors) -> tuple:
    """(mean, sample std) of absolute errors; std is 0.0 for a single image."""
    errs = np.asarray(errors, dtype=np.float64)
    mae = float(errs.mean())
    std = float(errs.std(ddof=1)) if errs.size > 1 else 0.0
    return mae, std


def gradient_check_report(
    seed: int = 0,
    step: float = 1e-2,
    samples: int = 50,
    image_size: int = 16,
    corrupt: bool = False,
) -> dict:
    """Finite-difference verification of the joint loss gradient, per group.

    Builds a seeded pricnn_aux instance and a small synthetic image, then runs
    finite_diff_check over each of the seven parameter groups. Probes that
    flip a relu activation or a pooling argmax leave the objective's linear
    region and are resampled (see finite_diff_check). Returns
    {group: GradCheckResult}. With corrupt=True every analytic gradient is
    deliberately offset so the check must fail (a negative control).
    """
    from .dataio import SynthConfig, synth_generate  # local import, no cycle at module load

    config = TrainConfig(variant="pricnn_aux", seed=seed)
    synth = synth_generate(
        SynthConfig(num_images=1, rows=image_size, cols=image_size, cells_min=2, cells_max=5, seed=seed)
    )
    x = synth[0].image[None, None]
    targets = render_targets(synth, config)
    params = build_model("pricnn_aux", np.random.default_rng([seed, 0]))

    def probe():
        outputs, cache = forward(params, x, want_cache=True)
        combined, _ = loss_overall(outputs, targets, config)
        key = b"".join(
            np.packbits(cache[k] > 0).tobytes() if not k.endswith("poolidx") else cache[k].tobytes()
            for k in sorted(cache)
            if k.endswith((".out", ".hidden", "poolidx"))
        )
        return combined, key

    def value():
        return probe()[0]

    def grad():
        outputs, cache = forward(params, x, want_cache=True)
        d_y, d_aux = loss_gradients(outputs, targets, config)
        grads = backward(params, cache, d_y, d_aux).tensor_dict()
        if corrupt:
            bump = np.float32(0.5 * max(float(np.abs(g).max()) for g in grads.values()))
            grads = {n: g + bump for n, g in grads.items()}
        return grads

    rng = np.random.default_rng([seed, 2])
    results = {}
    for group in params.active_groups():
        results[group] = finite_diff_check(
            value,
            grad,
            params.group_tensors(group),
            step=step,
            samples=samples,
            rng=rng,
            probe_fn=probe,
        )
    return results


def evaluate(
    params: ModelParams, variant: str, dataset, density_scale: float = 1.0
) -> EvalReport:
    """Count every image by integrating its estimated density map."""
    if variant != params.variant:
        raise ValueError("variant does not match the parameters")
    _check_dataset(dataset)
    results = []
    for img in dataset:
        outputs = forward(params, img.image[None, None])
        est = count_from_density(outputs.y_hat[0, 0]) / density_scale
        true = float(len(img.centroids))
        results.append(ImageResult(img.id, true, est, abs(est - true)))
    mae, std = summarize_errors([r.abs_error for r in results])
    return EvalReport(results, mae, std)
