"""Dual-channel longitudinal prediction network and its ablations.

The full network (variant ``lp``) runs two independent channels (inner and
outer surface) of six spatial graph convolutional layers with per-vertex
feature widths 36, 72, 36, 18, 9, 3. A pointwise linear head after layer 3
emits the month-3 growth map; its output is concatenated with the layer-3
hidden features (36 + 3 = 39 channels) and fed onward, and a second
pointwise head after layer 6 emits the month-6 growth map. Variant ``ip3``
keeps only the layers up to the month-3 head; variant ``ip6`` drops the
month-3 head and the concatenation (layer 4 sees 36 channels), predicting
the displacement from the baseline directly.

Losses are masked per time point by the availability flags, so subjects
with a missing month contribute nothing for it: months with flag 0 are
omitted from the recorded graph, which makes their gradient contribution
exactly zero.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import layers as ly
from .autodiff import AdamState, ParameterStore, Tensor, adam_step
from .mesh import SurfacePair, neighborhood_difference_map

__all__ = [
    "NetworkConfig",
    "GcnnModel",
    "GrowthMaps",
    "Checkpoint",
    "TrainingDiverged",
    "build_model",
    "build_inputs",
    "forward",
    "reconstruct_surfaces",
    "thickness",
    "total_loss",
    "train",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

VARIANTS = ("lp", "ip3", "ip6")
CHANNELS = ("inner", "outer")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the offending update and subject."""

    def __init__(self, update, subject_id, loss_value):
        self.update = update
        self.subject_id = subject_id
        self.loss_value = loss_value
        super().__init__(
            f"training diverged at update {update} on subject {subject_id!r}: "
            f"loss = {loss_value}"
        )


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture and optimization settings of one training run."""

    channels: tuple = (36, 72, 36, 18, 9, 3)
    month3_after: int = 3
    alpha: float = 0.5
    n_rho: int = 5
    n_theta: int = 12
    rho_d: float = 2.0
    lr_initial: float = 1e-4
    lr_after: float = 1e-5
    lr_switch_update: int = 5000
    max_updates: int = 25000
    seed: int = 20240601
    activation: str = "relu"
    use_bias: bool = True
    normalize_weights: bool = False

    def __post_init__(self):
        if not self.channels:
            raise ValueError("channel list must be non-empty")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if not 1 <= self.month3_after <= len(self.channels):
            raise ValueError("month-3 head position outside the layer stack")
        if self.rho_d <= 0:
            raise ValueError("rho_d must be positive")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        if self.max_updates < 0 or self.lr_switch_update < 0:
            raise ValueError("update counts must be non-negative")

    @property
    def n_kernels(self):
        return self.n_rho * self.n_theta


@dataclass
class GrowthMaps:
    """Per-vertex displacement maps, any subset per variant (mm)."""

    o3_inner: Optional[np.ndarray] = None
    o3_outer: Optional[np.ndarray] = None
    o6_inner: Optional[np.ndarray] = None
    o6_outer: Optional[np.ndarray] = None

    def of(self, month, channel):
        return getattr(self, f"o{month}_{channel}")


def _layer_plan(variant, config):
    """(in_channels, out_channels) of every conv layer present in a variant."""
    outs = list(config.channels)
    cut = config.month3_after
    if variant == "ip3":
        outs = outs[:cut]
    ins = [3] + outs[:-1]
    if variant == "lp" and len(outs) > cut:
        ins[cut] = outs[cut - 1] + 3  # concat of hidden features and O3
    return list(zip(ins, outs))


@dataclass
class GcnnModel:
    """All learnable parameters of one variant, backed by a flat store."""

    variant: str
    config: NetworkConfig
    store: ParameterStore

    @property
    def has_month3(self):
        return self.variant in ("lp", "ip3")

    @property
    def has_month6(self):
        return self.variant in ("lp", "ip6")

    def conv_layer(self, channel, index):
        """Layer ``index`` (1-based) of one channel as tape-ready params."""
        prefix = f"{channel}.conv{index}"
        kernels = ly.GaussianKernelSet(
            self.store.tensor(f"{prefix}.means"),
            self.store.tensor(f"{prefix}.log_vars"),
            self.config.n_rho,
            self.config.n_theta,
        )
        bias = (
            self.store.tensor(f"{prefix}.bias") if self.config.use_bias else None
        )
        return ly.ConvLayerParams(kernels, self.store.tensor(f"{prefix}.gamma"), bias)

    def head(self, channel, month):
        prefix = f"{channel}.head{month}"
        return (
            self.store.tensor(f"{prefix}.weight"),
            self.store.tensor(f"{prefix}.bias"),
        )

    def n_conv_layers(self):
        return len(_layer_plan(self.variant, self.config))

    def feature_widths(self):
        """Per-vertex widths along one channel, heads in parentheses order."""
        widths = [3]
        plan = _layer_plan(self.variant, self.config)
        cut = self.config.month3_after
        for i, (cin, cout) in enumerate(plan, start=1):
            widths.append(cout)
            if i == cut and self.has_month3:
                widths.append(3)  # month-3 head output
                if self.variant == "lp" and len(plan) > cut:
                    widths.append(cout + 3)  # concatenation
        if self.has_month6:
            widths.append(3)  # month-6 head output
        return widths

    def parameter_count(self):
        return self.store.size


def build_model(variant, config, n_vertices=None):
    """Fresh model with seeded initialization in serialization order.

    Registration (and therefore serialization) order is: channel, then each
    conv layer's kernels (means, log-variances), filter bank, bias, then the
    month heads, inner channel first.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11C]))
    store = ParameterStore()
    plan = _layer_plan(variant, config)
    n_kernels = config.n_kernels
    for channel in CHANNELS:
        for index, (c_in, c_out) in enumerate(plan, start=1):
            means, log_vars = ly.init_kernel_arrays(
                rng, config.n_rho, config.n_theta, config.rho_d
            )
            prefix = f"{channel}.conv{index}"
            store.register(f"{prefix}.means", means)
            store.register(f"{prefix}.log_vars", log_vars)
            store.register(
                f"{prefix}.gamma", ly.init_gamma(rng, c_in, c_out, n_kernels)
            )
            if config.use_bias:
                store.register(f"{prefix}.bias", np.zeros(c_out))
        head_specs = []
        if variant in ("lp", "ip3"):
            head_specs.append((3, config.channels[config.month3_after - 1]))
        if variant in ("lp", "ip6"):
            head_specs.append((6, config.channels[-1]))
        for month, width in head_specs:
            bound = np.sqrt(6.0 / (width + 3))
            store.register(
                f"{channel}.head{month}.weight",
                rng.uniform(-bound, bound, (width, 3)),
            )
            store.register(f"{channel}.head{month}.bias", np.zeros(3))
    return GcnnModel(variant, config, store)


# ---------------------------------------------------------------------------
# Inputs, forward, reconstruction
# ---------------------------------------------------------------------------

@dataclass
class NetworkInputs:
    """Constant per-channel features and parameterizations of one subject."""

    features: dict          # channel -> (V, 3) ndarray
    params: dict            # channel -> LocalParameterization
    n_vertices: int


def build_inputs(sample, param_inner, param_outer):
    """Neighborhood-difference features plus the (P, Theta) of each channel.

    The month-1 parameterizations are reused by every uniformization
    sub-layer: patches stay defined on the baseline geometry.
    """
    pair = sample.month1
    for name, param, mesh in (
        ("inner", param_inner, pair.inner),
        ("outer", param_outer, pair.outer),
    ):
        if param.n_vertices != mesh.n_vertices:
            raise ValueError(
                f"{name} parameterization covers {param.n_vertices} vertices, "
                f"mesh has {mesh.n_vertices}"
            )
    features = {
        "inner": neighborhood_difference_map(pair.inner),
        "outer": neighborhood_difference_map(pair.outer),
    }
    params = {"inner": param_inner, "outer": param_outer}
    return NetworkInputs(features, params, pair.n_vertices)


def _forward_channel(model, channel, feats, param):
    config = model.config
    cut = config.month3_after
    normalize = config.normalize_weights
    plan = _layer_plan(model.variant, config)
    x = feats
    o3 = None
    for index in range(1, len(plan) + 1):
        layer = model.conv_layer(channel, index)
        x = ly.spatial_conv(x, layer, param, normalize=normalize)
        if index < len(plan) or model.variant == "ip3":
            x = ad.relu(x)
        if index == cut and model.has_month3:
            w3, b3 = model.head(channel, 3)
            o3 = ad.add_rowvec(ad.matmul(x, w3), b3)
            if model.variant == "lp":
                x = ad.concat([x, o3], axis=1)
    o6 = None
    if model.has_month6:
        w6, b6 = model.head(channel, 6)
        o6 = ad.add_rowvec(ad.matmul(x, w6), b6)
    return o3, o6


def forward(model, inputs):
    """Growth-map tensors for every channel; subset per variant."""
    out = {}
    for channel in CHANNELS:
        feats = Tensor(inputs.features[channel])
        o3, o6 = _forward_channel(model, channel, feats, inputs.params[channel])
        out[channel] = {"o3": o3, "o6": o6}
    return out


def growth_maps_from_outputs(outputs):
    def val(channel, key):
        t = outputs[channel][key]
        return None if t is None else t.data.copy()

    return GrowthMaps(
        o3_inner=val("inner", "o3"),
        o3_outer=val("outer", "o3"),
        o6_inner=val("inner", "o6"),
        o6_outer=val("outer", "o6"),
    )


def reconstruct_surfaces(baseline, growth):
    """Predicted surface pairs from cumulative growth maps.

    Month-3 positions are baseline + O3. Month-6 positions continue from
    the predicted month-3 surface when O3 is available (variant ``lp``) and
    from the baseline otherwise (variant ``ip6``, whose O6 is a total
    displacement). Returns ``{month: SurfacePair}`` for available months.
    """
    result = {}
    base_inner = baseline.inner.positions
    base_outer = baseline.outer.positions
    cur_inner, cur_outer = base_inner, base_outer
    if growth.o3_inner is not None:
        cur_inner = base_inner + growth.o3_inner
        cur_outer = base_outer + growth.o3_outer
        result[3] = SurfacePair(
            baseline.inner.with_positions(cur_inner),
            baseline.outer.with_positions(cur_outer),
        )
    if growth.o6_inner is not None:
        pos_inner = cur_inner + growth.o6_inner
        pos_outer = cur_outer + growth.o6_outer
        result[6] = SurfacePair(
            baseline.inner.with_positions(pos_inner),
            baseline.outer.with_positions(pos_outer),
        )
    return result


def thickness(pair):
    """Per-vertex Euclidean distance between the paired surfaces (mm)."""
    return np.linalg.norm(pair.outer.positions - pair.inner.positions, axis=1)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _predicted_positions(outputs, baselines, month, variant):
    pos = {}
    for channel in CHANNELS:
        base = Tensor(baselines[channel])
        o3 = outputs[channel]["o3"]
        o6 = outputs[channel]["o6"]
        if month == 3:
            pos[channel] = ad.add(base, o3)
        else:
            if variant == "lp":
                pos[channel] = ad.add(ad.add(base, o3), o6)
            else:
                pos[channel] = ad.add(base, o6)
    return pos


def total_loss(outputs, sample, alpha, variant):
    """Flag-masked sum of displacement and thickness losses (Eq.-style).

    Per available month M: ``alpha * sum over channels and vertices of the
    squared position error`` plus ``(1 - alpha) * sum over vertices of the
    absolute thickness error``. Months with flag 0 are omitted from the
    graph entirely, which realizes the flag product exactly (zero loss and
    bit-zero gradient contribution).
    """
    baselines = {
        "inner": sample.month1.inner.positions,
        "outer": sample.month1.outer.positions,
    }
    months = []
    if variant in ("lp", "ip3") and sample.flag3:
        months.append(3)
    if variant in ("lp", "ip6") and sample.flag6:
        months.append(6)
    total = None
    for month in months:
        truth = sample.pair_at(month)
        pos = _predicted_positions(outputs, baselines, month, variant)
        disp = None
        for channel in CHANNELS:
            gt = truth.inner if channel == "inner" else truth.outer
            err = ad.sub(pos[channel], Tensor(gt.positions))
            term = ad.sum_(ad.sq_norm_rows(err))
            disp = term if disp is None else ad.add(disp, term)
        thick_pred = ad.norm_rows(ad.sub(pos["outer"], pos["inner"]))
        thick_true = Tensor(thickness(truth))
        thick = ad.sum_(ad.absolute(ad.sub(thick_pred, thick_true)))
        month_loss = ad.add(ad.smul(alpha, disp), ad.smul(1.0 - alpha, thick))
        total = month_loss if total is None else ad.add(total, month_loss)
    if total is None:
        total = Tensor(np.zeros(()))
    return total


# ---------------------------------------------------------------------------
# Training and prediction
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """Model parameters plus optimizer state and provenance echo."""

    variant: str
    config: NetworkConfig
    n_vertices: int
    flat_params: np.ndarray
    adam: Optional[AdamState] = None
    config_echo: str = ""

    def to_model(self):
        model = build_model(self.variant, self.config)
        if model.store.size != self.flat_params.size:
            raise ValueError(
                f"checkpoint holds {self.flat_params.size} parameters, "
                f"architecture expects {model.store.size}"
            )
        model.store.flat[:] = self.flat_params
        return model


def learning_rate(config, update):
    """Two-phase schedule; ``update`` is 1-based."""
    if update <= config.lr_switch_update:
        return config.lr_initial
    return config.lr_after


def train(cohort, inputs_by_subject, config, variant="lp", config_echo="",
          progress=None):
    """Seeded single-subject updates with the two-phase Adam schedule.

    ``cohort`` is a list of LongitudinalSample; ``inputs_by_subject`` maps
    subject id to prebuilt :class:`NetworkInputs`. One update consumes one
    subject; subjects are visited in seeded shuffled epochs. Returns
    ``(checkpoint, loss_curve)`` where the curve holds one
    ``(update, loss, lr)`` triple per update. Raises
    :class:`TrainingDiverged` when the loss becomes non-finite.
    """
    if not cohort:
        raise ValueError("cohort is empty")
    for sample in cohort:
        if sample.subject_id not in inputs_by_subject:
            raise ValueError(f"missing inputs for subject {sample.subject_id!r}")
    n_vertices = cohort[0].month1.n_vertices
    model = build_model(variant, config)
    adam = AdamState.zeros(model.store.size)
    shuffle_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, 0x5A7])
    )
    curve = []
    update = 0
    order = []
    while update < config.max_updates:
        if not order:
            order = list(shuffle_rng.permutation(len(cohort)))
        sample = cohort[order.pop(0)]
        update += 1
        model.store.zero_grad()
        outputs = forward(model, inputs_by_subject[sample.subject_id])
        loss = total_loss(outputs, sample, config.alpha, variant)
        loss_value = float(loss.data)
        if not np.isfinite(loss_value):
            raise TrainingDiverged(update, sample.subject_id, loss_value)
        ad.backward(loss)
        lr = learning_rate(config, update)
        adam_step(model.store.flat, model.store.flat_grad, adam, lr)
        curve.append((update, loss_value, lr))
        if progress is not None:
            progress(update, loss_value, lr)
    checkpoint = Checkpoint(
        variant=variant,
        config=config,
        n_vertices=n_vertices,
        flat_params=model.store.flat.copy(),
        adam=adam,
        config_echo=config_echo,
    )
    return checkpoint, curve


def predict(checkpoint, baseline, param_inner, param_outer):
    """Predicted surface pairs for a baseline pair, per checkpoint variant.

    Pure function of the checkpoint and the baseline (plus its
    parameterizations). Raises on vertex-count mismatch with the
    checkpoint's training resolution.
    """
    if baseline.n_vertices != checkpoint.n_vertices:
        raise ValueError(
            f"baseline has {baseline.n_vertices} vertices, checkpoint was "
            f"trained at {checkpoint.n_vertices}"
        )
    model = checkpoint.to_model()
    sample_like = _BaselineOnly(baseline)
    inputs = build_inputs(sample_like, param_inner, param_outer)
    outputs = forward(model, inputs)
    growth = growth_maps_from_outputs(outputs)
    return reconstruct_surfaces(baseline, growth)


class _BaselineOnly:
    """Minimal sample adapter exposing just the baseline pair."""

    def __init__(self, pair):
        self.month1 = pair


# ---------------------------------------------------------------------------
# Checkpoint serialization ("GCNN")
# ---------------------------------------------------------------------------

_MAGIC = b"GCNN"
_VERSION = 1


def save_checkpoint(checkpoint, path):
    """Binary checkpoint: structured header, echo text, flat parameters.

    Parameter order is the registration order of :func:`build_model`
    (channel, then per layer kernels/gamma/bias, then heads). All floats
    are 64-bit little-endian.
    """
    cfg = checkpoint.config
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        variant_b = checkpoint.variant.encode()
        fh.write(struct.pack("<B", len(variant_b)))
        fh.write(variant_b)
        fh.write(struct.pack("<I", checkpoint.n_vertices))
        fh.write(struct.pack("<I", len(cfg.channels)))
        fh.write(struct.pack(f"<{len(cfg.channels)}I", *cfg.channels))
        fh.write(struct.pack("<IIIdd", cfg.month3_after, cfg.n_rho,
                             cfg.n_theta, cfg.rho_d, cfg.alpha))
        fh.write(struct.pack("<ddIQ", cfg.lr_initial, cfg.lr_after,
                             cfg.lr_switch_update, cfg.max_updates))
        fh.write(struct.pack("<QBB", cfg.seed, int(cfg.use_bias),
                             int(cfg.normalize_weights)))
        echo_b = checkpoint.config_echo.encode()
        fh.write(struct.pack("<I", len(echo_b)))
        fh.write(echo_b)
        fh.write(struct.pack("<Q", checkpoint.flat_params.size))
        fh.write(checkpoint.flat_params.astype("<f8").tobytes())
        if checkpoint.adam is None:
            fh.write(struct.pack("<B", 0))
        else:
            adam = checkpoint.adam
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Qddd", adam.step, adam.beta1, adam.beta2,
                                 adam.eps))
            fh.write(adam.m.astype("<f8").tobytes())
            fh.write(adam.v.astype("<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a GCNN checkpoint")
    off = 4
    (version,) = struct.unpack_from("<I", raw, off)
    off += 4
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (vlen,) = struct.unpack_from("<B", raw, off)
    off += 1
    variant = raw[off : off + vlen].decode()
    off += vlen
    (n_vertices,) = struct.unpack_from("<I", raw, off)
    off += 4
    (n_ch,) = struct.unpack_from("<I", raw, off)
    off += 4
    channels = struct.unpack_from(f"<{n_ch}I", raw, off)
    off += 4 * n_ch
    month3_after, n_rho, n_theta, rho_d, alpha = struct.unpack_from(
        "<IIIdd", raw, off
    )
    off += struct.calcsize("<IIIdd")
    lr_initial, lr_after, lr_switch, max_updates = struct.unpack_from(
        "<ddIQ", raw, off
    )
    off += struct.calcsize("<ddIQ")
    seed, use_bias, normalize = struct.unpack_from("<QBB", raw, off)
    off += struct.calcsize("<QBB")
    (echo_len,) = struct.unpack_from("<I", raw, off)
    off += 4
    echo = raw[off : off + echo_len].decode()
    off += echo_len
    (n_params,) = struct.unpack_from("<Q", raw, off)
    off += 8
    flat = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off).copy()
    off += 8 * n_params
    (has_adam,) = struct.unpack_from("<B", raw, off)
    off += 1
    adam = None
    if has_adam:
        step, beta1, beta2, eps = struct.unpack_from("<Qddd", raw, off)
        off += struct.calcsize("<Qddd")
        m = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off).copy()
        off += 8 * n_params
        v = np.frombuffer(raw, dtype="<f8", count=n_params, offset=off).copy()
        adam = AdamState(m=m, v=v, step=step, beta1=beta1, beta2=beta2, eps=eps)
    config = NetworkConfig(
        channels=tuple(int(c) for c in channels),
        month3_after=month3_after,
        alpha=alpha,
        n_rho=n_rho,
        n_theta=n_theta,
        rho_d=rho_d,
        lr_initial=lr_initial,
        lr_after=lr_after,
        lr_switch_update=lr_switch,
        max_updates=max_updates,
        seed=seed,
        use_bias=bool(use_bias),
        normalize_weights=bool(normalize),
    )
    return Checkpoint(
        variant=variant,
        config=config,
        n_vertices=n_vertices,
        flat_params=flat,
        adam=adam,
        config_echo=echo,
    )
